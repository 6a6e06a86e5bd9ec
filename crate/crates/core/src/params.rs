//! Named parameter and buffer storage.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Tensor;

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics), both keyed by stable names in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    /// Fresh parameters for `cfg`, including the domain head.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        };
        for (name, shape, kind) in layout(cfg) {
            let t = match kind {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let n = shape.iter().product();
                    Tensor::from_vec(&shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())?
                }
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    let n = shape.iter().product();
                    Tensor::from_vec(&shape, (0..n).map(|_| dist.sample(&mut rng)).collect())?
                }
                Init::Const(v) => Tensor::full(&shape, v),
                Init::Buffer(v) => {
                    store.buffers.insert(name, Tensor::full(&shape, v));
                    continue;
                }
            };
            store.params.insert(name, t);
        }
        Ok(store)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Invariant(format!("no parameter named {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("no buffer named {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::Invariant(format!("no buffer named {name}")))
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor> {
        &mut self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Checks that names and shapes are exactly those `cfg` implies.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = layout(cfg);
        let (mut np, mut nb) = (0, 0);
        for (name, shape, kind) in &expected {
            let (found, what) = match kind {
                Init::Buffer(_) => {
                    nb += 1;
                    (self.buffers.get(name), "buffer")
                }
                _ => {
                    np += 1;
                    (self.params.get(name), "parameter")
                }
            };
            match found {
                None => return Err(Error::Checkpoint(format!("missing {what} {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "{what} {name} has shape {:?}, config implies {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if np != self.params.len() || nb != self.buffers.len() {
            return Err(Error::Checkpoint("unexpected extra entries".into()));
        }
        Ok(())
    }

    pub(crate) fn from_parts(params: IndexMap<String, Tensor>, buffers: IndexMap<String, Tensor>) -> Self {
        Self { params, buffers }
    }
}

enum Init {
    FanIn(usize),
    Normal(f64),
    Const(f64),
    Buffer(f64),
}

fn bn(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), vec![c], Init::Const(1.0)));
    out.push((format!("{prefix}.beta"), vec![c], Init::Const(0.0)));
    out.push((format!("{prefix}.running_mean"), vec![c], Init::Buffer(0.0)));
    out.push((format!("{prefix}.running_var"), vec![c], Init::Buffer(1.0)));
}

fn ln(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), vec![c], Init::Const(1.0)));
    out.push((format!("{prefix}.beta"), vec![c], Init::Const(0.0)));
}

fn dense(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, n_out: usize, n_in: usize) {
    out.push((format!("{prefix}.weight"), vec![n_out, n_in], Init::FanIn(n_in)));
    out.push((format!("{prefix}.bias"), vec![n_out], Init::Const(0.0)));
}

fn conv_block(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, ci: usize, co: usize) {
    out.push((format!("{prefix}.conv1.weight"), vec![co, ci, 3, 3, 3], Init::FanIn(ci * 27)));
    bn(out, &format!("{prefix}.bn1"), co);
    out.push((format!("{prefix}.conv2.weight"), vec![co, co, 3, 3, 3], Init::FanIn(co * 27)));
    bn(out, &format!("{prefix}.bn2"), co);
}

/// Every named array of the model with its shape and initializer.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let c = cfg.base_channels;
    let d = cfg.embed_dim;
    let p = cfg.patch_side;
    let [d1, d2, d3] = cfg.decoder_channels();
    let mut out = Vec::new();
    conv_block(&mut out, "enc1", 1, c);
    conv_block(&mut out, "enc2", c, 2 * c);
    conv_block(&mut out, "enc3", 2 * c, 4 * c);
    out.push(("patch.weight".into(), vec![d, 4 * c, p, p, p], Init::FanIn(4 * c * p * p * p)));
    out.push(("patch.bias".into(), vec![d], Init::Const(0.0)));
    out.push(("pos_embed".into(), vec![1, cfg.num_tokens(), d], Init::Normal(0.02)));
    for i in 0..cfg.num_blocks {
        ln(&mut out, &format!("vit.{i}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            dense(&mut out, &format!("vit.{i}.attn.{proj}"), d, d);
        }
        ln(&mut out, &format!("vit.{i}.ln2"), d);
        dense(&mut out, &format!("vit.{i}.mlp.fc1"), cfg.mlp_hidden, d);
        dense(&mut out, &format!("vit.{i}.mlp.fc2"), d, cfg.mlp_hidden);
    }
    conv_block(&mut out, "dec1", d + 2 * c, d1);
    conv_block(&mut out, "dec2", d1 + c, d2);
    conv_block(&mut out, "dec3", d2, d3);
    out.push(("head.weight".into(), vec![cfg.num_classes, d3, 1, 1, 1], Init::FanIn(d3)));
    out.push(("head.bias".into(), vec![cfg.num_classes], Init::Const(0.0)));
    let [_, h1, h2, _] = crate::adaptation::domain_head_widths(cfg);
    dense(&mut out, "domain.fc1", h1, d);
    ln(&mut out, "domain.ln1", h1);
    dense(&mut out, "domain.fc2", h2, h1);
    ln(&mut out, "domain.ln2", h2);
    dense(&mut out, "domain.fc3", 2, h2);
    out
}
