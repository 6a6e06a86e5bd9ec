//! Supervised segmentation losses and the total training objective.
//!
//! All losses take the foreground probability `p` and binary ground truth
//! `y` flattened over voxels. Logs are clipped at [`EPS`], which is also
//! the Dice smoothing constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Focal share of the segmentation loss.
    pub alpha_mix: f64,
    /// Focal positive-class weight.
    pub alpha_balance: f64,
    /// Focusing exponent.
    pub gamma: f64,
    /// Adversarial (domain classifier) weight in the total objective.
    pub alpha_adv: f64,
    /// MMD² weight in the total objective.
    pub beta_mmd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha_mix: 0.4,
            alpha_balance: 0.25,
            gamma: 2.0,
            alpha_adv: 0.1,
            beta_mmd: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(what.to_string()))
            }
        };
        check((0.3..=0.5).contains(&self.alpha_mix), "loss.alpha_mix must lie in [0.3, 0.5]")?;
        check((0.0..=1.0).contains(&self.alpha_balance), "loss.alpha_balance must lie in [0, 1]")?;
        check(self.gamma >= 0.0, "loss.gamma must be >= 0")?;
        check(self.alpha_adv >= 0.0, "loss.alpha_adv must be >= 0")?;
        check(self.beta_mmd >= 0.0, "loss.beta_mmd must be >= 0")
    }
}

fn clip(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn in_clip(p: f64) -> bool {
    p > EPS && p < 1.0 - EPS
}

fn is_pos(y: f64) -> bool {
    y >= 0.5
}

/// `1 - (2Σpy + ε) / (Σp + Σy + ε)`
pub fn dice_loss(p: &[f64], y: &[f64]) -> f64 {
    let (inter, sp, sy) = dice_sums(p, y);
    1.0 - (2.0 * inter + EPS) / (sp + sy + EPS)
}

fn dice_sums(p: &[f64], y: &[f64]) -> (f64, f64, f64) {
    p.iter().zip(y).fold((0.0, 0.0, 0.0), |(i, a, b), (&pi, &yi)| {
        (i + pi * yi, a + pi, b + yi)
    })
}

pub fn dice_loss_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let (inter, sp, sy) = dice_sums(p, y);
    let den = sp + sy + EPS;
    let num = 2.0 * inter + EPS;
    y.iter().map(|&yi| -(2.0 * yi * den - num) / (den * den)).collect()
}

/// Binary cross-entropy averaged over voxels.
pub fn ce_loss(p: &[f64], y: &[f64]) -> f64 {
    balanced_ce(p, y, 0.5) * 2.0
}

pub fn ce_loss_grad(p: &[f64], y: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            if !in_clip(pi) {
                return 0.0;
            }
            -(yi / pi - (1.0 - yi) / (1.0 - pi)) / n
        })
        .collect()
}

/// α-balanced cross-entropy, averaged over voxels.
pub fn balanced_ce(p: &[f64], y: &[f64], alpha: f64) -> f64 {
    let n = p.len() as f64;
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = clip(pi);
            -alpha * yi * q.ln() - (1.0 - alpha) * (1.0 - yi) * (1.0 - q).ln()
        })
        .sum();
    s / n
}

fn focal_terms(p: f64, y: f64, alpha: f64) -> (f64, f64, f64) {
    // (p_t, α_i, dp_t/dp)
    if is_pos(y) {
        (p, alpha, 1.0)
    } else {
        (1.0 - p, 1.0 - alpha, -1.0)
    }
}

/// Mean over voxels of `-α_i (1 - p_t)^γ ln p_t`.
pub fn focal_loss(p: &[f64], y: &[f64], alpha_balance: f64, gamma: f64) -> f64 {
    let n = p.len() as f64;
    let s: f64 = p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let (pt, a, _) = focal_terms(pi, yi, alpha_balance);
            let pt = clip(pt);
            -a * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    s / n
}

pub fn focal_loss_grad(p: &[f64], y: &[f64], alpha_balance: f64, gamma: f64) -> Vec<f64> {
    let n = p.len() as f64;
    p.iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let (pt, a, dpt) = focal_terms(pi, yi, alpha_balance);
            if !in_clip(pt) {
                return 0.0;
            }
            let one_m = 1.0 - pt;
            let modulating = one_m.powf(gamma);
            let d_mod = if gamma == 0.0 {
                0.0
            } else {
                -gamma * one_m.powf(gamma - 1.0)
            };
            let d_pt = -a * (d_mod * pt.ln() + modulating / pt);
            d_pt * dpt / n
        })
        .collect()
}

/// Individual components of the segmentation loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegComponents {
    pub dice: f64,
    pub ce: f64,
    pub focal: f64,
}

impl SegComponents {
    pub fn compute(p: &[f64], y: &[f64], w: &LossWeights) -> Self {
        Self {
            dice: dice_loss(p, y),
            ce: ce_loss(p, y),
            focal: focal_loss(p, y, w.alpha_balance, w.gamma),
        }
    }

    /// `(1 - α_mix)(dice + ce) + α_mix · focal`
    pub fn combine(&self, alpha_mix: f64) -> f64 {
        (1.0 - alpha_mix) * (self.dice + self.ce) + alpha_mix * self.focal
    }
}

pub fn seg_loss(p: &[f64], y: &[f64], w: &LossWeights) -> f64 {
    SegComponents::compute(p, y, w).combine(w.alpha_mix)
}

pub fn seg_loss_grad(p: &[f64], y: &[f64], w: &LossWeights) -> Vec<f64> {
    let base = 1.0 - w.alpha_mix;
    let gd = dice_loss_grad(p, y);
    let gc = ce_loss_grad(p, y);
    let gf = focal_loss_grad(p, y, w.alpha_balance, w.gamma);
    gd.iter()
        .zip(&gc)
        .zip(&gf)
        .map(|((a, b), c)| base * (a + b) + w.alpha_mix * c)
        .collect()
}

/// `seg + α_adv · adv + β · mmd²`. The MMD² term is used raw, so it can be
/// negative.
pub fn total_loss(seg: f64, adv: f64, mmd2: f64, w: &LossWeights) -> f64 {
    seg + w.alpha_adv * adv + w.beta_mmd * mmd2
}
