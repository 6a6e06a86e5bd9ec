//! Linear domain probe on pooled encoder features.

use pfda_core::data::Case;
use pfda_core::model::{pooled_features, ModelConfig};
use pfda_core::params::ParamStore;
use pfda_core::tensor::Tensor;

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeResult {
    pub train_acc: f64,
    pub test_acc: f64,
}

/// Pooled features of each case, one forward pass per case.
pub fn case_features(params: &ParamStore, cfg: &ModelConfig, cases: &[&Case], zscore: bool) -> Result<Vec<Vec<f64>>> {
    let s = cfg.input_side;
    cases
        .iter()
        .map(|c| {
            let x = Tensor::from_vec(&[1, 1, s, s, s], c.input(zscore))?;
            Ok(pooled_features(params, cfg, x)?.data().to_vec())
        })
        .collect()
}

/// Logistic regression on standardized features, full-batch gradient
/// descent with a small ridge penalty.
pub struct Logistic {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], y: &[bool]) -> Self {
        let (n, d) = (x.len(), x.first().map_or(0, Vec::len));
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut model = Logistic {
            mean,
            scale,
            w: vec![0.0; d],
            b: 0.0,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| model.standardize(r)).collect();
        let (lr, ridge) = (0.5, 1e-3);
        for _ in 0..2000 {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (zi, &yi) in z.iter().zip(y) {
                let p = sigmoid(dot(&model.w, zi) + model.b);
                let e = p - f64::from(u8::from(yi));
                for (g, v) in gw.iter_mut().zip(zi) {
                    *g += e * v / n as f64;
                }
                gb += e / n as f64;
            }
            for (w, g) in model.w.iter_mut().zip(&gw) {
                *w -= lr * (g + ridge * *w);
            }
            model.b -= lr * gb;
        }
        model
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    pub fn predict(&self, row: &[f64]) -> bool {
        dot(&self.w, &self.standardize(row)) + self.b > 0.0
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[bool]) -> f64 {
        let hits = x.iter().zip(y).filter(|(r, &t)| self.predict(r) == t).count();
        hits as f64 / x.len().max(1) as f64
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits a source-vs-target probe on `fit` cases and scores it on `eval`
/// cases; `true` marks the target site.
pub fn domain_probe(
    params: &ParamStore,
    cfg: &ModelConfig,
    zscore: bool,
    fit: (&[&Case], &[&Case]),
    eval: (&[&Case], &[&Case]),
) -> Result<ProbeResult> {
    let labelled = |src: &[&Case], tgt: &[&Case]| -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
        let mut x = case_features(params, cfg, src, zscore)?;
        x.extend(case_features(params, cfg, tgt, zscore)?);
        let y = std::iter::repeat_n(false, src.len()).chain(std::iter::repeat_n(true, tgt.len())).collect();
        Ok((x, y))
    };
    let (xf, yf) = labelled(fit.0, fit.1)?;
    let (xe, ye) = labelled(eval.0, eval.1)?;
    let model = Logistic::fit(&xf, &yf);
    Ok(ProbeResult {
        train_acc: model.accuracy(&xf, &yf),
        test_acc: model.accuracy(&xe, &ye),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_clouds() {
        let x: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let off = if i % 2 == 0 { 0.0 } else { 3.0 };
                vec![off + (i as f64 * 0.37).sin(), 100.0 + (i as f64 * 1.3).cos(), 5.0]
            })
            .collect();
        let y: Vec<bool> = (0..40).map(|i| i % 2 == 1).collect();
        let m = Logistic::fit(&x, &y);
        assert_eq!(m.accuracy(&x, &y), 1.0);
    }

    #[test]
    fn unlearnable_labels_stay_near_chance() {
        let x: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 * 0.7).sin()]).collect();
        let y: Vec<bool> = (0..200).map(|i| (i * 7919 % 13) % 2 == 0).collect();
        let m = Logistic::fit(&x[..100], &y[..100]);
        let acc = m.accuracy(&x[100..], &y[100..]);
        assert!(acc < 0.75, "{acc}");
    }
}
