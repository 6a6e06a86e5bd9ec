//! The hybrid CNN + transformer encoder-decoder.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::ops::{BatchStats, BnStats, ConvSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_side: usize,
    pub base_channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub mlp_hidden: usize,
    pub patch_side: usize,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// The full-size instance: 192³ input, d = 512, six blocks.
    pub fn paper() -> Self {
        Self {
            input_side: 192,
            base_channels: 32,
            embed_dim: 512,
            num_heads: 8,
            num_blocks: 6,
            mlp_hidden: 2048,
            patch_side: 8,
            num_classes: 2,
        }
    }

    /// Small CPU instance on 48³ inputs (27 tokens).
    pub fn desk() -> Self {
        Self {
            input_side: 48,
            base_channels: 4,
            embed_dim: 64,
            num_heads: 4,
            num_blocks: 1,
            mlp_hidden: 128,
            patch_side: 2,
            num_classes: 2,
        }
    }

    /// Smallest useful instance, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_side: 16,
            base_channels: 2,
            embed_dim: 16,
            num_heads: 2,
            num_blocks: 1,
            mlp_hidden: 32,
            patch_side: 2,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("input_side", self.input_side),
            ("base_channels", self.base_channels),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("num_blocks", self.num_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("patch_side", self.patch_side),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !self.input_side.is_multiple_of(8 * self.patch_side) {
            return Err(Error::Config(format!(
                "model.input_side {} is not divisible by 8 * patch_side = {}",
                self.input_side,
                8 * self.patch_side
            )));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "model.embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(16) {
            return Err(Error::Config(format!(
                "model.embed_dim {} must be a multiple of 16 (decoder widths d/4, d/8, d/16)",
                self.embed_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("model.num_classes must be >= 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    /// Side of the token grid, `S / (8p)`.
    pub fn token_grid(&self) -> usize {
        self.input_side / (8 * self.patch_side)
    }

    pub fn num_tokens(&self) -> usize {
        self.token_grid().pow(3)
    }

    /// Encoder feature shapes `f1, f2, f3` for batch size `b`.
    pub fn encoder_shapes(&self, b: usize) -> [[usize; 5]; 3] {
        let (s, c) = (self.input_side, self.base_channels);
        [
            [b, c, s / 2, s / 2, s / 2],
            [b, 2 * c, s / 4, s / 4, s / 4],
            [b, 4 * c, s / 8, s / 8, s / 8],
        ]
    }

    pub fn vit_out_shape(&self, b: usize) -> [usize; 5] {
        let s = self.input_side / 8;
        [b, self.embed_dim, s, s, s]
    }

    pub fn decoder_channels(&self) -> [usize; 3] {
        let d = self.embed_dim;
        [d / 4, d / 8, d / 16]
    }

    pub fn output_shape(&self, b: usize) -> [usize; 5] {
        let s = self.input_side;
        [b, self.num_classes, s, s, s]
    }

    /// `key=value` lines used to echo the config into checkpoints and manifests.
    pub fn echo(&self) -> String {
        format!(
            "input_side={}\nbase_channels={}\nembed_dim={}\nnum_heads={}\nnum_blocks={}\nmlp_hidden={}\npatch_side={}\nnum_classes={}\n",
            self.input_side,
            self.base_channels,
            self.embed_dim,
            self.num_heads,
            self.num_blocks,
            self.mlp_hidden,
            self.patch_side,
            self.num_classes
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; statistics are recorded.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// One forward pass: the graph, lazily created parameter leaves and the
/// batch-norm statistics observed along the way.
pub struct ForwardCtx<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    leaves: IndexMap<String, Var>,
    mode: Mode,
    track_grad: bool,
    bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode, track_grad: bool) -> Self {
        Self {
            g: Graph::new(),
            params,
            leaves: IndexMap::new(),
            mode,
            track_grad,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Graph leaf for the named parameter, created on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.leaves.get(name) {
            return Ok(v);
        }
        let v = self.g.leaf(self.params.get(name)?.clone(), self.track_grad);
        self.leaves.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter leaves touched so far.
    pub fn leaves(&self) -> &IndexMap<String, Var> {
        &self.leaves
    }

    /// Batch norm with the named parameters/buffers under `prefix`.
    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm(x, gamma, beta, BnStats::Batch, BN_EPS)?;
                if let Some(s) = stats {
                    self.bn_updates.push((prefix.to_string(), s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.params.buffer(&format!("{prefix}.running_mean"))?.data();
                let var = self.params.buffer(&format!("{prefix}.running_var"))?.data();
                let (y, _) = self.g.batch_norm(x, gamma, beta, BnStats::Running { mean, var }, BN_EPS)?;
                Ok(y)
            }
        }
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Gradients of `root` for every parameter leaf, keyed by name.
    pub fn param_grads(&self, root: Var) -> IndexMap<String, Tensor> {
        let mut grads: Gradients = self.g.backward(root);
        self.leaves
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.clone(), g)))
            .collect()
    }
}

/// Applies recorded batch statistics to the running buffers.
pub fn apply_bn_updates(params: &mut ParamStore, updates: &[(String, BatchStats)]) -> Result<()> {
    for (prefix, (mean, var)) in updates {
        for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
            let buf = params.buffer_mut(&format!("{prefix}.{suffix}"))?;
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

/// Two 3×3×3 conv → BN → ReLU layers.
fn conv_block(ctx: &mut ForwardCtx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let mut h = x;
    for i in 1..=2 {
        let w = ctx.param(&format!("{prefix}.conv{i}.weight"))?;
        h = ctx.g.conv3d(h, w, None, ConvSpec::SAME3)?;
        h = ctx.batch_norm(h, &format!("{prefix}.bn{i}"))?;
        h = ctx.g.relu(h);
    }
    Ok(h)
}

/// Three conv blocks, each followed by 2×2×2 max pooling.
pub fn cnn_encode(ctx: &mut ForwardCtx<'_>, x: Var, cfg: &ModelConfig) -> Result<[Var; 3]> {
    let s = cfg.input_side;
    let shape = ctx.g.shape(x);
    if shape.len() != 5 || shape[1..] != [1, s, s, s] {
        return Err(Error::Shape(format!("expected input (B, 1, {s}, {s}, {s}), got {shape:?}")));
    }
    let mut h = x;
    let mut feats = [x; 3];
    for (k, slot) in feats.iter_mut().enumerate() {
        h = conv_block(ctx, h, &format!("enc{}", k + 1))?;
        h = ctx.g.max_pool2(h)?;
        *slot = h;
    }
    Ok(feats)
}

/// Non-overlapping `p³` patch projection to `d` channels plus positional
/// embedding; returns `(B, N, d)` tokens.
pub fn patch_embed(ctx: &mut ForwardCtx<'_>, f3: Var, cfg: &ModelConfig) -> Result<Var> {
    let side = ctx.g.shape(f3)[2];
    if !side.is_multiple_of(cfg.patch_side) {
        return Err(Error::Config(format!(
            "feature side {side} is not divisible by patch side {}",
            cfg.patch_side
        )));
    }
    let w = ctx.param("patch.weight")?;
    let b = ctx.param("patch.bias")?;
    let proj = ctx.g.conv3d(f3, w, Some(b), ConvSpec::patch(cfg.patch_side))?;
    let tokens = ctx.g.channels_to_tokens(proj)?;
    let pos = ctx.param("pos_embed")?;
    ctx.g.add_broadcast_batch(tokens, pos)
}

fn dense(ctx: &mut ForwardCtx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = ctx.param(&format!("{prefix}.weight"))?;
    let b = ctx.param(&format!("{prefix}.bias"))?;
    ctx.g.linear(x, w, Some(b))
}

fn layer_norm(ctx: &mut ForwardCtx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let gamma = ctx.param(&format!("{prefix}.gamma"))?;
    let beta = ctx.param(&format!("{prefix}.beta"))?;
    ctx.g.layer_norm(x, gamma, beta, LN_EPS)
}

/// `L` pre-norm transformer blocks over `(B, N, d)` tokens.
pub fn transformer_encode(ctx: &mut ForwardCtx<'_>, t: Var, cfg: &ModelConfig) -> Result<Var> {
    if !cfg.embed_dim.is_multiple_of(cfg.num_heads) {
        return Err(Error::Config(format!(
            "embed dim {} not divisible by {} heads",
            cfg.embed_dim, cfg.num_heads
        )));
    }
    let mut x = t;
    for i in 0..cfg.num_blocks {
        let h = layer_norm(ctx, x, &format!("vit.{i}.ln1"))?;
        let q = dense(ctx, h, &format!("vit.{i}.attn.q"))?;
        let k = dense(ctx, h, &format!("vit.{i}.attn.k"))?;
        let v = dense(ctx, h, &format!("vit.{i}.attn.v"))?;
        let a = ctx.g.attention(q, k, v, cfg.num_heads)?;
        let o = dense(ctx, a, &format!("vit.{i}.attn.o"))?;
        x = ctx.g.add(x, o)?;
        let h = layer_norm(ctx, x, &format!("vit.{i}.ln2"))?;
        let m = dense(ctx, h, &format!("vit.{i}.mlp.fc1"))?;
        let m = ctx.g.gelu(m);
        let m = dense(ctx, m, &format!("vit.{i}.mlp.fc2"))?;
        x = ctx.g.add(x, m)?;
    }
    Ok(x)
}

/// Broadcasts every token over its `p³` footprint: `(B, d, S/8, S/8, S/8)`.
pub fn tokens_to_volume(ctx: &mut ForwardCtx<'_>, t: Var, cfg: &ModelConfig) -> Result<Var> {
    ctx.g.tokens_to_volume(t, cfg.patch_side)
}

/// Three upsample → concat skip → conv block stages, then a pointwise
/// projection to `K` classes and a channel softmax.
pub fn decode(ctx: &mut ForwardCtx<'_>, vit_out: Var, skips: (Var, Var), cfg: &ModelConfig) -> Result<Var> {
    let (f1, f2) = skips;
    if ctx.g.shape(vit_out).get(1) != Some(&cfg.embed_dim) {
        return Err(Error::Shape(format!("decoder input {:?}", ctx.g.shape(vit_out))));
    }
    let mut h = vit_out;
    for (k, skip) in [(1, Some(f2)), (2, Some(f1)), (3, None)] {
        h = ctx.g.upsample_trilinear2(h)?;
        if let Some(s) = skip {
            if ctx.g.shape(s)[2..] != ctx.g.shape(h)[2..] {
                return Err(Error::Shape(format!(
                    "decoder stage {k}: skip {:?} vs upsampled {:?}",
                    ctx.g.shape(s),
                    ctx.g.shape(h)
                )));
            }
            h = ctx.g.concat_channels(h, s)?;
        }
        h = conv_block(ctx, h, &format!("dec{k}"))?;
    }
    let w = ctx.param("head.weight")?;
    let b = ctx.param("head.bias")?;
    let logits = ctx.g.conv3d(h, w, Some(b), ConvSpec::POINTWISE)?;
    ctx.g.softmax_channels(logits)
}

/// Graph handles of one full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    pub prob: Var,
    pub vit_out: Var,
    pub tokens: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

/// Encoder half of [`forward`]: skips, tokens and the bottleneck volume.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub vit_out: Var,
    pub tokens: Var,
    pub f1: Var,
    pub f2: Var,
    pub f3: Var,
}

pub fn encode(ctx: &mut ForwardCtx<'_>, x: Var, cfg: &ModelConfig) -> Result<Encoded> {
    let [f1, f2, f3] = cnn_encode(ctx, x, cfg)?;
    let t = patch_embed(ctx, f3, cfg)?;
    let tokens = transformer_encode(ctx, t, cfg)?;
    let vit_out = tokens_to_volume(ctx, tokens, cfg)?;
    Ok(Encoded {
        vit_out,
        tokens,
        f1,
        f2,
        f3,
    })
}

pub fn forward(ctx: &mut ForwardCtx<'_>, x: Var, cfg: &ModelConfig) -> Result<ForwardOut> {
    let e = encode(ctx, x, cfg)?;
    let prob = decode(ctx, e.vit_out, (e.f1, e.f2), cfg)?;
    Ok(ForwardOut {
        prob,
        vit_out: e.vit_out,
        tokens: e.tokens,
        f1: e.f1,
        f2: e.f2,
        f3: e.f3,
    })
}

/// Eval-mode probability map `(B, K, S, S, S)` for a `(B, 1, S, S, S)` input.
pub fn predict(params: &ParamStore, cfg: &ModelConfig, input: Tensor) -> Result<Tensor> {
    let mut ctx = ForwardCtx::new(params, Mode::Eval, false);
    let x = ctx.g.constant(input);
    let out = forward(&mut ctx, x, cfg)?;
    Ok(ctx.g.value(out.prob).clone())
}

/// Eval-mode GAP-pooled `vit_out` features, `(B, d)`.
pub fn pooled_features(params: &ParamStore, cfg: &ModelConfig, input: Tensor) -> Result<Tensor> {
    let mut ctx = ForwardCtx::new(params, Mode::Eval, false);
    let x = ctx.g.constant(input);
    let e = encode(&mut ctx, x, cfg)?;
    let pooled = ctx.g.global_avg_pool(e.vit_out)?;
    Ok(ctx.g.value(pooled).clone())
}
