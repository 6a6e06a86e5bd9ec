//! Domain adaptation: gradient reversal, the domain classifier head, the
//! adversarial loss and the multi-kernel unbiased MMD² estimator.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{ForwardCtx, ModelConfig};
use crate::tensor::Tensor;

/// Bandwidth multipliers applied to the median pairwise distance.
pub const BANDWIDTH_MULTIPLIERS: [f64; 5] = [
    0.25,
    std::f64::consts::FRAC_1_SQRT_2,
    1.0,
    std::f64::consts::SQRT_2,
    2.0,
];

pub const DOMAIN_DROPOUT: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> usize {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

/// Which adaptation terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    GrlMmd,
    Grl,
    Mmd,
    None,
}

impl StudyMode {
    pub const ALL: [StudyMode; 4] = [StudyMode::GrlMmd, StudyMode::Grl, StudyMode::Mmd, StudyMode::None];

    pub fn uses_grl(self) -> bool {
        matches!(self, StudyMode::GrlMmd | StudyMode::Grl)
    }

    pub fn uses_mmd(self) -> bool {
        matches!(self, StudyMode::GrlMmd | StudyMode::Mmd)
    }

    pub fn uses_target(self) -> bool {
        self != StudyMode::None
    }

    pub fn name(self) -> &'static str {
        match self {
            StudyMode::GrlMmd => "grl_mmd",
            StudyMode::Grl => "grl",
            StudyMode::Mmd => "mmd",
            StudyMode::None => "none",
        }
    }

    /// Row label used in result tables.
    pub fn title(self) -> &'static str {
        match self {
            StudyMode::GrlMmd => "Study 1 (GRL+MMD)",
            StudyMode::Grl => "Study 2 (GRL only)",
            StudyMode::Mmd => "Study 3 (MMD only)",
            StudyMode::None => "Study 4 (No DA)",
        }
    }
}

impl fmt::Display for StudyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StudyMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown study mode {s:?} (grl_mmd | grl | mmd | none)")))
    }
}

/// Reversal strength policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaSchedule {
    Constant { value: f64 },
    /// `λ_max · (2 / (1 + exp(-10 t/T)) - 1)`
    Ramp { max: f64 },
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule::Constant { value: 1.0 }
    }
}

impl LambdaSchedule {
    pub fn at(&self, step: u64, total_steps: u64) -> f64 {
        match *self {
            LambdaSchedule::Constant { value } => value,
            LambdaSchedule::Ramp { max } => {
                let t = if total_steps == 0 {
                    1.0
                } else {
                    (step as f64 / total_steps as f64).min(1.0)
                };
                max * (2.0 / (1.0 + (-10.0 * t).exp()) - 1.0)
            }
        }
    }
}

/// Forward pass of the gradient reversal layer.
pub fn grl_apply(x: &Tensor, _lambda: f64) -> Tensor {
    x.clone()
}

/// Backward pass of the gradient reversal layer: `-λ · g`.
pub fn grl_backward(g: &Tensor, lambda: f64) -> Tensor {
    g.map(|v| -lambda * v)
}

/// Median-heuristic kernel bandwidths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelBandwidths {
    /// Median pairwise distance (1 when every feature is identical).
    pub base: f64,
    pub sigmas: [f64; 5],
}

impl KernelBandwidths {
    pub fn from_base(base: f64) -> Self {
        Self {
            base,
            sigmas: BANDWIDTH_MULTIPLIERS.map(|m| m * base),
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Indices `(i, j)` of the pair(s) defining the median of `values`
/// (one pair for an odd count, two for an even count).
fn median_pairs(values: &[(f64, usize, usize)]) -> Vec<(usize, usize)> {
    let mut sorted: Vec<_> = values.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let m = sorted.len();
    if m % 2 == 1 {
        vec![(sorted[m / 2].1, sorted[m / 2].2)]
    } else {
        vec![
            (sorted[m / 2 - 1].1, sorted[m / 2 - 1].2),
            (sorted[m / 2].1, sorted[m / 2].2),
        ]
    }
}

fn pairwise(features: &[&[f64]]) -> Vec<(f64, usize, usize)> {
    let n = features.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            out.push((sq_dist(features[i], features[j]).sqrt(), i, j));
        }
    }
    out
}

/// Bandwidths from the median pairwise Euclidean distance over all features.
pub fn median_bandwidths(features: &[&[f64]]) -> Result<KernelBandwidths> {
    if features.len() < 2 {
        return Err(Error::EstimatorUndefined(format!(
            "median bandwidth needs at least 2 feature vectors, got {}",
            features.len()
        )));
    }
    let pairs = pairwise(features);
    let mut d: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    Ok(KernelBandwidths::from_base(if med > 0.0 { med } else { 1.0 }))
}

/// Gaussian kernel mixture `Σ_m exp(-‖f - f'‖² / (2σ_m²))`.
pub fn mk_kernel(f: &[f64], f2: &[f64], sigmas: &[f64]) -> f64 {
    let d2 = sq_dist(f, f2);
    sigmas.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum()
}

/// Gradient of a single Gaussian kernel with respect to its first argument:
/// `k_σ(f_s, f_t) (f_t - f_s) / σ²`.
pub fn gaussian_kernel_grad(fs: &[f64], ft: &[f64], sigma: f64) -> Vec<f64> {
    let k = (-sq_dist(fs, ft) / (2.0 * sigma * sigma)).exp();
    fs.iter().zip(ft).map(|(a, b)| k * (b - a) / (sigma * sigma)).collect()
}

fn check_sizes(ns: usize, nt: usize) -> Result<()> {
    if ns < 2 || nt < 2 {
        return Err(Error::EstimatorUndefined(format!(
            "unbiased MMD² needs n_s >= 2 and n_t >= 2, got n_s = {ns}, n_t = {nt}"
        )));
    }
    Ok(())
}

/// Unbiased multi-kernel MMD² between source and target feature sets.
///
/// Each pairwise squared distance is computed once and reused across the
/// kernel mixture; within-domain sums use the symmetric half.
pub fn mmd2_unbiased(fs: &[&[f64]], ft: &[&[f64]], sigmas: &[f64]) -> Result<f64> {
    let (ns, nt) = (fs.len(), ft.len());
    check_sizes(ns, nt)?;
    let coef: Vec<f64> = sigmas.iter().map(|s| -1.0 / (2.0 * s * s)).collect();
    let k = |d2: f64| -> f64 { coef.iter().map(|c| (c * d2).exp()).sum() };
    let within = |set: &[&[f64]]| -> f64 {
        let n = set.len();
        let mut s = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                s += k(sq_dist(set[i], set[j]));
            }
        }
        2.0 * s / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    for a in fs {
        for b in ft {
            cross += k(sq_dist(a, b));
        }
    }
    Ok(within(fs) + within(ft) - 2.0 * cross / (ns * nt) as f64)
}

/// MMD² with median-heuristic bandwidths and its gradient with respect to
/// every feature, including the path through the bandwidth.
pub struct MmdWithGrad {
    pub value: f64,
    pub bandwidths: KernelBandwidths,
    pub grad_source: Vec<Vec<f64>>,
    pub grad_target: Vec<Vec<f64>>,
}

pub fn mmd2_median_with_grad(fs: &[&[f64]], ft: &[&[f64]]) -> Result<MmdWithGrad> {
    let (ns, nt) = (fs.len(), ft.len());
    check_sizes(ns, nt)?;
    let z: Vec<&[f64]> = fs.iter().chain(ft).copied().collect();
    let n = z.len();
    let dim = z[0].len();
    let pairs = pairwise(&z);
    let bw = median_bandwidths(&z)?;
    let base_is_data = {
        let med_pairs = median_pairs(&pairs);
        let any_positive = med_pairs.iter().any(|&(i, j)| sq_dist(z[i], z[j]) > 0.0);
        any_positive.then_some(med_pairs)
    };
    let w_ss = 2.0 / (ns * (ns - 1)) as f64;
    let w_tt = 2.0 / (nt * (nt - 1)) as f64;
    let w_st = -2.0 / (ns * nt) as f64;
    let mut grads = vec![vec![0.0; dim]; n];
    let mut value = 0.0;
    let mut d_base = 0.0;
    for &(_, i, j) in &pairs {
        let w = match (i < ns, j < ns) {
            (true, true) => w_ss,
            (false, false) => w_tt,
            _ => w_st,
        };
        let d2 = sq_dist(z[i], z[j]);
        let mut coef = 0.0;
        for (&s, &m) in bw.sigmas.iter().zip(&BANDWIDTH_MULTIPLIERS) {
            let kv = (-d2 / (2.0 * s * s)).exp();
            value += w * kv;
            coef += kv / (s * s);
            d_base += w * kv * d2 / (m * m * bw.base.powi(3));
        }
        // ∂/∂z_i of w·k(z_i, z_j) = -w · Σ k_m/σ_m² · (z_i - z_j)
        for c in 0..dim {
            let diff = z[i][c] - z[j][c];
            grads[i][c] -= w * coef * diff;
            grads[j][c] += w * coef * diff;
        }
    }
    if let Some(med_pairs) = base_is_data {
        let share = 1.0 / med_pairs.len() as f64;
        for (i, j) in med_pairs {
            let r = sq_dist(z[i], z[j]).sqrt();
            if r == 0.0 {
                continue;
            }
            for c in 0..dim {
                let dr = (z[i][c] - z[j][c]) / r;
                grads[i][c] += d_base * share * dr;
                grads[j][c] -= d_base * share * dr;
            }
        }
    }
    let grad_target = grads.split_off(ns);
    Ok(MmdWithGrad {
        value,
        bandwidths: bw,
        grad_source: grads,
        grad_target,
    })
}

/// Mean softmax cross-entropy of 2-class logits against domain labels.
pub fn adversarial_loss(logits: &[[f64; 2]], labels: &[Domain]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::Shape("adversarial loss over an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let s: f64 = logits
        .iter()
        .zip(labels)
        .map(|(l, d)| log_sum_exp2(l) - l[d.label()])
        .sum();
    Ok(s / logits.len() as f64)
}

fn log_sum_exp2(l: &[f64; 2]) -> f64 {
    let m = l[0].max(l[1]);
    m + ((l[0] - m).exp() + (l[1] - m).exp()).ln()
}

pub fn softmax2(l: &[f64; 2]) -> [f64; 2] {
    let lse = log_sum_exp2(l);
    [(l[0] - lse).exp(), (l[1] - lse).exp()]
}

/// Fraction of rows whose argmax logit matches the label.
pub fn domain_accuracy(logits: &[[f64; 2]], labels: &[Domain]) -> f64 {
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(l, d)| usize::from(l[1] > l[0]) == d.label())
        .count();
    hits as f64 / logits.len().max(1) as f64
}

pub(crate) fn logits_rows(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks(2).map(|c| [c[0], c[1]]).collect()
}

impl Graph {
    /// Mean 2-class cross-entropy of `logits (B, 2)`.
    pub fn adversarial_loss(&mut self, logits: Var, labels: &[Domain]) -> Result<Var> {
        if self.shape(logits).len() != 2 || self.shape(logits)[1] != 2 {
            return Err(Error::Shape(format!("domain logits {:?}", self.shape(logits))));
        }
        let rows = logits_rows(self.value(logits));
        let value = adversarial_loss(&rows, labels)?;
        let labels = labels.to_vec();
        let b = rows.len() as f64;
        Ok(self.push(
            Tensor::scalar(value),
            &[logits],
            Box::new(move |p, _, g| {
                let gv = g.item();
                let mut d = Tensor::zeros(p[0].shape());
                for (i, (row, lab)) in logits_rows(p[0]).iter().zip(&labels).enumerate() {
                    let s = softmax2(row);
                    for c in 0..2 {
                        let onehot = if c == lab.label() { 1.0 } else { 0.0 };
                        d.data_mut()[2 * i + c] = gv * (s[c] - onehot) / b;
                    }
                }
                vec![Some(d)]
            }),
        ))
    }

    /// Unbiased MMD² between rows `source` and rows `target` of a `(B, d)`
    /// feature matrix, with median-heuristic bandwidths.
    pub fn mmd2(&mut self, features: Var, source: &[usize], target: &[usize]) -> Result<(Var, KernelBandwidths)> {
        let (b, dim) = match self.shape(features)[..] {
            [b, d] => (b, d),
            _ => return Err(Error::Shape(format!("mmd features {:?}", self.shape(features)))),
        };
        if source.iter().chain(target).any(|&r| r >= b) {
            return Err(Error::Shape("mmd row index out of range".into()));
        }
        let data = self.value(features).data();
        let rows = |idx: &[usize]| -> Vec<&[f64]> { idx.iter().map(|&r| &data[r * dim..(r + 1) * dim]).collect() };
        let res = mmd2_median_with_grad(&rows(source), &rows(target))?;
        let mut grad = Tensor::zeros(&[b, dim]);
        for (&r, gr) in source.iter().zip(&res.grad_source).chain(target.iter().zip(&res.grad_target)) {
            for (dst, v) in grad.data_mut()[r * dim..(r + 1) * dim].iter_mut().zip(gr) {
                *dst += v;
            }
        }
        let var = self.push(
            Tensor::scalar(res.value),
            &[features],
            Box::new(move |_, _, g| vec![Some(grad.scale(g.item()))]),
        );
        Ok((var, res.bandwidths))
    }
}

/// Hidden widths of the domain head: `d → d/4 → d/8 → 2`.
pub fn domain_head_widths(cfg: &ModelConfig) -> [usize; 4] {
    let d = cfg.embed_dim;
    [d, d / 4, d / 8, 2]
}

/// GAP over the feature volume, then the FC stack
/// (linear → ReLU → layer norm → dropout) × 2 → linear to two logits.
/// Dropout is active only when `rng` is given.
pub fn domain_classify<R: Rng>(ctx: &mut ForwardCtx<'_>, vit_out: Var, rng: Option<&mut R>) -> Result<Var> {
    if !ctx.g.value(vit_out).is_finite() {
        return Err(Error::NonFinite("domain classifier input".into()));
    }
    let pooled = ctx.g.global_avg_pool(vit_out)?;
    domain_head(ctx, pooled, rng)
}

/// The FC stack of the domain classifier on already pooled `(B, d)` features.
pub fn domain_head<R: Rng>(ctx: &mut ForwardCtx<'_>, pooled: Var, mut rng: Option<&mut R>) -> Result<Var> {
    let mut h = pooled;
    for layer in 1..=2 {
        let w = ctx.param(&format!("domain.fc{layer}.weight"))?;
        let b = ctx.param(&format!("domain.fc{layer}.bias"))?;
        h = ctx.g.linear(h, w, Some(b))?;
        h = ctx.g.relu(h);
        let gamma = ctx.param(&format!("domain.ln{layer}.gamma"))?;
        let beta = ctx.param(&format!("domain.ln{layer}.beta"))?;
        h = ctx.g.layer_norm(h, gamma, beta, 1e-5)?;
        if let Some(r) = rng.as_deref_mut() {
            h = ctx.g.dropout(h, DOMAIN_DROPOUT, r);
        }
    }
    let w = ctx.param("domain.fc3.weight")?;
    let b = ctx.param("domain.fc3.bias")?;
    let logits = ctx.g.linear(h, w, Some(b))?;
    if !ctx.g.value(logits).is_finite() {
        return Err(Error::NonFinite("domain logits".into()));
    }
    Ok(logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[Vec<f64>]) -> Vec<&[f64]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    /// Brute-force O(n²) double loops straight from the estimator definition.
    fn brute_mmd2(fs: &[Vec<f64>], ft: &[Vec<f64>], sigmas: &[f64]) -> f64 {
        let (ns, nt) = (fs.len() as f64, ft.len() as f64);
        let mut ss = 0.0;
        for (i, a) in fs.iter().enumerate() {
            for (j, b) in fs.iter().enumerate() {
                if i != j {
                    ss += mk_kernel(a, b, sigmas);
                }
            }
        }
        let mut tt = 0.0;
        for (i, a) in ft.iter().enumerate() {
            for (j, b) in ft.iter().enumerate() {
                if i != j {
                    tt += mk_kernel(a, b, sigmas);
                }
            }
        }
        let mut st = 0.0;
        for a in fs {
            for b in ft {
                st += mk_kernel(a, b, sigmas);
            }
        }
        ss / (ns * (ns - 1.0)) + tt / (nt * (nt - 1.0)) - 2.0 * st / (ns * nt)
    }

    #[test]
    fn grl_forward_and_backward() {
        let x = Tensor::from_vec(&[2], vec![3.5, -1.0]).unwrap();
        assert_eq!(grl_apply(&x, 1.0), x);
        let g = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        assert_eq!(grl_backward(&g, 1.0).data(), &[-1.0, 2.0]);
        assert!(grl_backward(&g, 0.0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bandwidth_examples() {
        let f = [vec![0.0], vec![2.0]];
        let bw = median_bandwidths(&rows(&f)).unwrap();
        assert_eq!(bw.base, 2.0);
        for (s, e) in bw.sigmas.iter().zip([0.5, std::f64::consts::SQRT_2, 2.0, 2.0 * std::f64::consts::SQRT_2, 4.0]) {
            assert_relative_eq!(*s, e, epsilon = 1e-12);
        }
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(median_bandwidths(&rows(&same)).unwrap().base, 1.0);
        assert!(matches!(median_bandwidths(&rows(&f[..1])), Err(Error::EstimatorUndefined(_))));
    }

    #[test]
    fn kernel_properties() {
        let s = KernelBandwidths::from_base(1.0).sigmas;
        assert_eq!(mk_kernel(&[1.0, 2.0], &[1.0, 2.0], &s), 5.0);
        assert!(mk_kernel(&[0.0], &[1e4], &s) < 1e-300);
        let (a, b) = ([0.3, -1.2], [1.1, 0.4]);
        assert_eq!(mk_kernel(&a, &b, &s), mk_kernel(&b, &a, &s));
    }

    #[test]
    fn single_kernel_gradient_matches_finite_differences() {
        let (fs, ft, sigma) = ([0.3, -0.7, 1.2], [1.0, 0.1, 0.5], 0.8);
        let g = gaussian_kernel_grad(&fs, &ft, sigma);
        let h = 1e-6;
        for i in 0..3 {
            let mut a = fs;
            let mut b = fs;
            a[i] += h;
            b[i] -= h;
            let num = (mk_kernel(&a, &ft, &[sigma]) - mk_kernel(&b, &ft, &[sigma])) / (2.0 * h);
            assert_relative_eq!(g[i], num, max_relative = 1e-6);
        }
    }

    #[test]
    fn mmd_examples() {
        let fs = [vec![0.0], vec![0.0]];
        let ft = [vec![1.0], vec![1.0]];
        let v = mmd2_unbiased(&rows(&fs), &rows(&ft), &[1.0]).unwrap();
        assert_relative_eq!(v, 2.0 - 2.0 * (-0.5f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(v, 0.78694, epsilon = 1e-5);
        assert_eq!(mmd2_unbiased(&rows(&fs), &rows(&fs), &[1.0]).unwrap(), 0.0);
        assert!(matches!(
            mmd2_unbiased(&rows(&fs[..1]), &rows(&ft), &[1.0]),
            Err(Error::EstimatorUndefined(_))
        ));
    }

    #[test]
    fn adversarial_examples() {
        let l = adversarial_loss(&[[0.0, 0.0], [0.0, 0.0]], &[Domain::Source, Domain::Target]).unwrap();
        assert_relative_eq!(l, std::f64::consts::LN_2, epsilon = 1e-15);
        let conf = adversarial_loss(&[[50.0, -50.0], [-50.0, 50.0]], &[Domain::Source, Domain::Target]).unwrap();
        assert!(conf < 1e-40);
        // probabilities (0.25, 0.75) for a source sample
        let l = adversarial_loss(&[[0.0, 3f64.ln()]], &[Domain::Source]).unwrap();
        assert_relative_eq!(l, -(0.25f64.ln()), epsilon = 1e-12);
        assert!(adversarial_loss(&[], &[]).is_err());
    }

    #[test]
    fn lambda_ramp() {
        let r = LambdaSchedule::Ramp { max: 1.0 };
        assert_eq!(r.at(0, 100), 0.0);
        assert!(r.at(100, 100) > 0.999);
        assert!(r.at(30, 100) < r.at(60, 100));
        assert_eq!(LambdaSchedule::default().at(7, 100), 1.0);
    }

    #[test]
    fn study_modes_parse() {
        for m in StudyMode::ALL {
            assert_eq!(m.name().parse::<StudyMode>().unwrap(), m);
        }
        assert!("both".parse::<StudyMode>().is_err());
    }

    #[test]
    fn mmd_gradient_including_bandwidth_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng, n: usize, shift: f64| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..3).map(|_| rng.gen::<f64>() + shift).collect()).collect()
        };
        let fs = mk(&mut rng, 3, 0.0);
        let ft = mk(&mut rng, 2, 0.5);
        let f = |fs: &[Vec<f64>], ft: &[Vec<f64>]| {
            let z: Vec<&[f64]> = fs.iter().chain(ft).map(|r| r.as_slice()).collect();
            let bw = median_bandwidths(&z).unwrap();
            mmd2_unbiased(&rows(fs), &rows(ft), &bw.sigmas).unwrap()
        };
        let res = mmd2_median_with_grad(&rows(&fs), &rows(&ft)).unwrap();
        assert_relative_eq!(res.value, f(&fs, &ft), max_relative = 1e-12);
        let h = 1e-6;
        for (which, row, c) in [(0, 0, 0), (0, 2, 1), (1, 0, 2), (1, 1, 0)] {
            let (mut a_s, mut a_t, mut b_s, mut b_t) = (fs.clone(), ft.clone(), fs.clone(), ft.clone());
            if which == 0 {
                a_s[row][c] += h;
                b_s[row][c] -= h;
            } else {
                a_t[row][c] += h;
                b_t[row][c] -= h;
            }
            let num = (f(&a_s, &a_t) - f(&b_s, &b_t)) / (2.0 * h);
            let ana = if which == 0 { res.grad_source[row][c] } else { res.grad_target[row][c] };
            assert_relative_eq!(ana, num, max_relative = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn optimized_mmd_matches_brute_force(
            seed in 0u64..1000, ns in 2usize..12, nt in 2usize..12, dim in 1usize..16,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fs: Vec<Vec<f64>> = (0..ns).map(|_| (0..dim).map(|_| rng.gen::<f64>()).collect()).collect();
            let ft: Vec<Vec<f64>> = (0..nt).map(|_| (0..dim).map(|_| rng.gen::<f64>() + 0.3).collect()).collect();
            let sig = KernelBandwidths::from_base(0.7).sigmas;
            let fast = mmd2_unbiased(&rows(&fs), &rows(&ft), &sig).unwrap();
            let slow = brute_mmd2(&fs, &ft, &sig);
            prop_assert!((fast - slow).abs() <= 1e-9 * slow.abs().max(1e-12));
        }

        #[test]
        fn bandwidths_scale_with_features(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
            let scaled: Vec<Vec<f64>> = f.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
            let a = median_bandwidths(&rows(&f)).unwrap();
            let b = median_bandwidths(&rows(&scaled)).unwrap();
            for (x, y) in a.sigmas.iter().zip(&b.sigmas) {
                prop_assert!((x * c - y).abs() <= 1e-12 * y);
            }
        }
    }
}
