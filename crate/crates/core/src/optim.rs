//! Adam and global-norm gradient clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl Adam {
    /// One update at 1-based step `t`. Parameters without a gradient are
    /// left untouched, moments included.
    pub fn step(&mut self, params: &mut ParamStore, grads: &IndexMap<String, Tensor>, t: u64, cfg: &AdamConfig) -> Result<()> {
        let bc1 = 1.0 - cfg.beta1.powf(t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(t as f64);
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient of {name}: {:?} vs {:?}", g.shape(), p.shape())));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &IndexMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = ModelConfig::tiny();
        let mut params = ParamStore::init(&cfg, 0).unwrap();
        let before = params.get("head.bias").unwrap().clone();
        let mut grads = IndexMap::new();
        grads.insert("head.bias".to_string(), Tensor::from_vec(&[2], vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::default();
        adam.step(&mut params, &grads, 1, &AdamConfig::default()).unwrap();
        let after = params.get("head.bias").unwrap();
        // bias-corrected first step is lr · sign(g) up to eps
        assert!((after.data()[0] - (before.data()[0] - 1e-4)).abs() < 1e-10);
        assert!((after.data()[1] - (before.data()[1] + 1e-4)).abs() < 1e-10);
        assert_eq!(adam.m.len(), 1);
    }

    #[test]
    fn clipping() {
        let mut g = IndexMap::new();
        g.insert("a".to_string(), Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        clip_grad_norm(&mut g, 1.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
    }
}
