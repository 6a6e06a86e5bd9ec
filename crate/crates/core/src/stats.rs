//! Paired t-test and Pearson correlation.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    /// Two-tailed p-value.
    pub p: f64,
    pub df: usize,
}

/// Paired two-tailed t-test on `x - y`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<TTest> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("paired samples of length {} and {}", x.len(), y.len())));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::DegenerateVariance(format!("need at least 2 pairs, got {n}")));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    // relative guard: differences that are constant up to rounding
    let scale = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var.sqrt() <= 1e-12 * scale || var == 0.0 {
        return Err(Error::DegenerateVariance("paired differences are constant".into()));
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TTest { t, p, df })
}

/// Pearson product-moment correlation.
pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need two equal-length samples of size >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Closed-form two-tailed p for df = 2: `1 - |t| / sqrt(t² + 2)`.
    fn p_df2(t: f64) -> f64 {
        1.0 - t.abs() / (t * t + 2.0).sqrt()
    }

    #[test]
    fn paired_example() {
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[2.0, 2.0, 5.0]).unwrap();
        assert_relative_eq!(r.t, -(3f64.sqrt()), epsilon = 1e-12);
        assert_eq!(r.df, 2);
        assert_relative_eq!(r.p, p_df2(r.t), epsilon = 1e-10);
        assert!((r.p - 0.2254).abs() < 1e-4);
        let back = paired_t_test(&[2.0, 2.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(back.t, -r.t);
        assert_eq!(back.p, r.p);
    }

    #[test]
    fn df2_cdf_matches_closed_form_across_t() {
        for t in [0.1, 0.5, 1.0, 2.5, 7.0, 30.0] {
            // d = [a, a + 1, a + 2] with mean a + 1, sd 1 gives t = (a + 1)·√3
            let a = t / 3f64.sqrt() - 1.0;
            let r = paired_t_test(&[a, a + 1.0, a + 2.0], &[0.0; 3]).unwrap();
            assert_relative_eq!(r.t, t, max_relative = 1e-12);
            assert_relative_eq!(r.p, p_df2(t), max_relative = 1e-9, epsilon = 1e-14);
        }
    }

    #[test]
    fn degenerate_variance() {
        let x = [0.5, 0.7, 0.9];
        let y: Vec<f64> = x.iter().map(|v| v + 0.01).collect();
        assert!(matches!(paired_t_test(&x, &y), Err(Error::DegenerateVariance(_))));
        assert!(matches!(paired_t_test(&x, &x), Err(Error::DegenerateVariance(_))));
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(pearson_r(&x, &x).unwrap(), 1.0, epsilon = 1e-15);
        let y: Vec<f64> = x.iter().map(|v| -2.0 * v + 7.0).collect();
        assert_relative_eq!(pearson_r(&x, &y).unwrap(), -1.0, epsilon = 1e-15);
        assert_relative_eq!(pearson_r(&x, &[1.0, 2.0, 3.0, 5.0]).unwrap(), 0.98270762, epsilon = 1e-8);
        assert!(matches!(pearson_r(&x, &[2.0; 4]), Err(Error::UndefinedCorrelation(_))));
    }

    proptest! {
        #[test]
        fn pearson_affine_invariant(
            v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
            a in 0.1f64..5.0, b in -5.0f64..5.0,
        ) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let Ok(r) = pearson_r(&x, &y) {
                let x2: Vec<f64> = x.iter().map(|t| a * t + b).collect();
                let r2 = pearson_r(&x2, &y).unwrap();
                prop_assert!((r - r2).abs() < 1e-9);
            }
        }

        #[test]
        fn t_is_antisymmetric(v in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 2..30)) {
            let x: Vec<f64> = v.iter().map(|p| p.0).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            if let (Ok(a), Ok(b)) = (paired_t_test(&x, &y), paired_t_test(&y, &x)) {
                prop_assert_eq!(a.t, -b.t);
                prop_assert_eq!(a.p, b.p);
            }
        }
    }
}
