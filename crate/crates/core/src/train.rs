//! Dual-domain training: segmentation on source labels, adversarial loss
//! through gradient reversal, and MMD between pooled source/target features.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{domain_accuracy, domain_classify, logits_rows, Domain, KernelBandwidths, LambdaSchedule, StudyMode};
use crate::data::{BatchPlan, Case};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::losses::{LossWeights, SegComponents};
use crate::metrics::{CaseMetrics, Metric, MetricsReport};
use crate::model::{apply_bn_updates, encode, forward, predict, ForwardCtx, ForwardOut, Mode, ModelConfig};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::volume::MaskVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub study: StudyMode,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub lambda: LambdaSchedule,
    /// Global gradient-norm limit; 0 disables clipping.
    pub clip_norm: f64,
    pub supervise_target: bool,
    pub zscore: bool,
    pub batch_per_domain: usize,
    pub epochs: usize,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            study: StudyMode::GrlMmd,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lambda: LambdaSchedule::default(),
            clip_norm: 5.0,
            supervise_target: false,
            zscore: false,
            batch_per_domain: 2,
            epochs: 10,
            val_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.adam.validate()?;
        if self.batch_per_domain == 0 {
            return Err(Error::Config("train.batch_per_domain must be >= 1".into()));
        }
        if self.study.uses_mmd() && self.batch_per_domain < 2 {
            return Err(Error::Config(format!(
                "train.batch_per_domain = {} but MMD needs at least 2 samples per domain",
                self.batch_per_domain
            )));
        }
        if self.epochs == 0 || self.val_every == 0 {
            return Err(Error::Config("train.epochs and train.val_every must be >= 1".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("train.clip_norm must be >= 0".into()));
        }
        match self.lambda {
            LambdaSchedule::Constant { value: v } | LambdaSchedule::Ramp { max: v } if !(v >= 0.0) => {
                Err(Error::Config("lambda must be >= 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Loss weights with the study's inactive terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            alpha_adv: if self.study.uses_grl() { self.weights.alpha_adv } else { 0.0 },
            beta_mmd: if self.study.uses_mmd() { self.weights.beta_mmd } else { 0.0 },
            ..self.weights
        }
    }
}

/// One network input with an optional label volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

impl Sample {
    pub fn from_case(case: &Case, zscore: bool, with_mask: bool) -> Self {
        Self {
            image: case.input(zscore),
            mask: with_mask.then(|| case.target()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainBatch {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
}

impl DomainBatch {
    pub fn from_cases(source: &[&Case], target: &[&Case], zscore: bool) -> Self {
        Self {
            source: source.iter().map(|c| Sample::from_case(c, zscore, true)).collect(),
            target: target.iter().map(|c| Sample::from_case(c, zscore, true)).collect(),
        }
    }
}

/// Parameters, optimizer moments, step counter and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: ParamStore::init(cfg, seed)?,
            adam: Adam::default(),
            step: 0,
            seed,
        })
    }

    /// Dropout randomness for the current step.
    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.step + 1);
        rng
    }
}

/// Itemized loss values of one step. Inactive terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub seg: f64,
    pub adv: f64,
    pub mmd2: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub losses: LossBreakdown,
    pub seg_parts: SegComponents,
    /// Domain-classifier batch accuracy (GRL studies only).
    pub domain_acc: Option<f64>,
    pub lambda: f64,
    pub grad_norm: f64,
    pub bandwidths: Option<KernelBandwidths>,
}

/// The assembled objective of one batch.
pub struct Objective {
    pub total: Var,
    pub seg: Var,
    pub seg_parts: SegComponents,
    pub adv: Option<Var>,
    pub mmd2: Option<Var>,
    pub logits: Option<Var>,
    pub labels: Vec<Domain>,
    /// Forward pass of the source rows.
    pub out: ForwardOut,
    pub bandwidths: Option<KernelBandwidths>,
}

impl Objective {
    pub fn breakdown(&self, ctx: &ForwardCtx<'_>) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| ctx.g.value(v).item());
        LossBreakdown {
            seg: ctx.g.value(self.seg).item(),
            adv: val(self.adv),
            mmd2: val(self.mmd2),
            total: ctx.g.value(self.total).item(),
        }
    }
}

fn stack(rows: &[Sample], cfg: &ModelConfig) -> Result<Tensor> {
    let s = cfg.input_side;
    let sp = s * s * s;
    let mut input = Vec::with_capacity(rows.len() * sp);
    for r in rows {
        if r.image.len() != sp {
            return Err(Error::Shape(format!("sample has {} voxels, expected {sp}", r.image.len())));
        }
        input.extend_from_slice(&r.image);
    }
    Tensor::from_vec(&[rows.len(), 1, s, s, s], input)
}

/// Forward pass of a domain batch and the weighted objective
/// `seg + α_adv · adv + β · mmd²`. Dropout in the domain head is active
/// only when `rng` is given.
pub fn build_objective(
    ctx: &mut ForwardCtx<'_>,
    batch: &DomainBatch,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    lambda: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Objective> {
    let study = tc.study;
    let use_target = study.uses_target() || tc.supervise_target;
    let ns = batch.source.len();
    let nt = if use_target { batch.target.len() } else { 0 };
    if ns == 0 {
        return Err(Error::Config("batch has no source samples".into()));
    }
    if use_target && nt == 0 {
        return Err(Error::Config("batch has no target samples".into()));
    }
    if study.uses_mmd() && (ns < 2 || nt < 2) {
        return Err(Error::EstimatorUndefined(format!(
            "MMD needs n_s >= 2 and n_t >= 2, got {ns} and {nt}"
        )));
    }
    // Each domain is its own batch-norm batch: unlabelled target rows must
    // not take part in the statistics that normalize the supervised rows.
    let xs = ctx.g.constant(stack(&batch.source, cfg)?);
    let out = forward(ctx, xs, cfg)?;
    let (mut prob, mut features) = (out.prob, out.vit_out);
    let mut masks = Vec::new();
    for (i, r) in batch.source.iter().enumerate() {
        let m = r
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config(format!("source row {i} has no mask")))?;
        masks.extend_from_slice(m);
    }
    let mut seg_rows: Vec<usize> = (0..ns).collect();
    if nt > 0 {
        let xt = ctx.g.constant(stack(&batch.target[..nt], cfg)?);
        if tc.supervise_target {
            let t = forward(ctx, xt, cfg)?;
            prob = ctx.g.concat_batch(prob, t.prob)?;
            features = ctx.g.concat_batch(features, t.vit_out)?;
            for (i, r) in batch.target[..nt].iter().enumerate() {
                let m = r
                    .mask
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("target row {i} is supervised but has no mask")))?;
                masks.extend_from_slice(m);
            }
            seg_rows.extend(ns..ns + nt);
        } else {
            let t = encode(ctx, xt, cfg)?;
            features = ctx.g.concat_batch(features, t.vit_out)?;
        }
    }
    let w = tc.effective_weights();
    let (seg, seg_parts) = ctx.g.seg_loss(prob, &seg_rows, &masks, &w)?;
    let labels: Vec<Domain> = (0..ns + nt)
        .map(|i| if i < ns { Domain::Source } else { Domain::Target })
        .collect();

    let mut terms = vec![(seg, 1.0)];
    let (mut adv, mut logits) = (None, None);
    if study.uses_grl() {
        let reversed = ctx.g.grl(features, lambda);
        let l = domain_classify(ctx, reversed, rng)?;
        let a = ctx.g.adversarial_loss(l, &labels)?;
        terms.push((a, w.alpha_adv));
        adv = Some(a);
        logits = Some(l);
    }
    let (mut mmd2, mut bandwidths) = (None, None);
    if study.uses_mmd() {
        let pooled = ctx.g.global_avg_pool(features)?;
        let src: Vec<usize> = (0..ns).collect();
        let tgt: Vec<usize> = (ns..ns + nt).collect();
        let (m, bw) = ctx.g.mmd2(pooled, &src, &tgt)?;
        terms.push((m, w.beta_mmd));
        mmd2 = Some(m);
        bandwidths = Some(bw);
    }
    let total = ctx.g.weighted_sum(&terms)?;
    Ok(Objective {
        total,
        seg,
        seg_parts,
        adv,
        mmd2,
        logits,
        labels,
        out,
        bandwidths,
    })
}

/// One optimizer update on every parameter that receives a gradient.
pub fn train_step(
    state: &mut TrainState,
    batch: &DomainBatch,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    lambda: f64,
) -> Result<StepReport> {
    let mut rng = state.step_rng();
    let (losses, obj_parts, domain_acc, bandwidths, mut grads, bn) = {
        let mut ctx = ForwardCtx::new(&state.params, Mode::Train, true);
        let obj = build_objective(&mut ctx, batch, cfg, tc, lambda, Some(&mut rng))?;
        let losses = obj.breakdown(&ctx);
        for (name, v) in [("seg", losses.seg), ("adv", losses.adv), ("mmd2", losses.mmd2)] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss at step {} ({v})", state.step)));
            }
        }
        let domain_acc = obj
            .logits
            .map(|l| domain_accuracy(&logits_rows(ctx.g.value(l)), &obj.labels));
        let grads = ctx.param_grads(obj.total);
        let bn = ctx.take_bn_updates();
        (losses, obj.seg_parts, domain_acc, obj.bandwidths, grads, bn)
    };
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} at step {}", state.step)));
    }
    let grad_norm = if tc.clip_norm > 0.0 {
        clip_grad_norm(&mut grads, tc.clip_norm)
    } else {
        crate::optim::global_norm(&grads)
    };
    state.adam.step(&mut state.params, &grads, state.step + 1, &tc.adam)?;
    apply_bn_updates(&mut state.params, &bn)?;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        losses,
        seg_parts: obj_parts,
        domain_acc,
        lambda,
        grad_norm,
        bandwidths,
    })
}

/// Foreground mask from an eval-mode forward pass, thresholded at 0.5.
pub fn predict_mask(params: &ParamStore, cfg: &ModelConfig, case: &Case, zscore: bool) -> Result<MaskVolume> {
    let s = cfg.input_side;
    if case.volume.shape() != [s; 3] {
        return Err(Error::Shape(format!("case {} is {:?}, model expects {s}³", case.id, case.volume.shape())));
    }
    let prob = predict(params, cfg, Tensor::from_vec(&[1, 1, s, s, s], case.input(zscore))?)?;
    let sp = s * s * s;
    let fg = &prob.data()[sp..2 * sp];
    let data = ndarray::Array3::from_shape_vec((s, s, s), fg.iter().map(|&p| u8::from(p > 0.5)).collect())
        .map_err(|e| Error::Shape(e.to_string()))?;
    MaskVolume::new(data, case.mask.spacing())
}

/// Eval-mode metrics for every case. Undefined per-case metrics are NaN.
pub fn validate(params: &ParamStore, cfg: &ModelConfig, cases: &[&Case], zscore: bool) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let mut report = MetricsReport::default();
    for c in cases {
        let pred = predict_mask(params, cfg, c, zscore)?;
        report.cases.push(CaseMetrics::evaluate(&c.id, &pred, &c.mask)?);
    }
    Ok(report)
}

/// One training-log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossBreakdown,
    pub domain_acc: Option<f64>,
    pub lambda: f64,
}

pub const LOG_HEADER: &str = "step,seg,adv,mmd2,total,domain_acc,lambda";

impl LogRow {
    pub fn csv(&self) -> String {
        let acc = self.domain_acc.map_or(String::new(), |a| format!("{a}"));
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.losses.seg, self.losses.adv, self.losses.mmd2, self.losses.total, acc, self.lambda
        )
    }
}

pub struct FitResult {
    pub state: TrainState,
    /// Parameters with the best validation Dice.
    pub best: ParamStore,
    pub best_dice: f64,
    pub best_epoch: usize,
    pub log: Vec<LogRow>,
}

/// Full training run with best-validation-Dice snapshot retention. `log`
/// receives the CSV training log as it is produced.
pub fn fit(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    source: &[&Case],
    target: &[&Case],
    val: &[&Case],
    mut log: Option<&mut dyn Write>,
) -> Result<FitResult> {
    cfg.validate()?;
    tc.validate()?;
    let plan = BatchPlan::new(source.len(), target.len(), tc.batch_per_domain, tc.seed)?;
    let total_steps = (plan.batches_per_epoch() * tc.epochs) as u64;
    let mut state = TrainState::new(cfg, tc.seed)?;
    let mut best = (f64::NEG_INFINITY, state.params.clone(), 0);
    let mut rows = Vec::new();
    if let Some(w) = log.as_deref_mut() {
        writeln!(w, "{LOG_HEADER}")?;
    }
    for epoch in 0..tc.epochs {
        for b in plan.epoch(epoch) {
            let src: Vec<&Case> = b.source.iter().map(|&i| source[i]).collect();
            let tgt: Vec<&Case> = b.target.iter().map(|&i| target[i]).collect();
            let batch = DomainBatch::from_cases(&src, &tgt, tc.zscore);
            let lambda = tc.lambda.at(state.step, total_steps);
            let r = train_step(&mut state, &batch, cfg, tc, lambda)?;
            let row = LogRow {
                step: r.step,
                losses: r.losses,
                domain_acc: r.domain_acc,
                lambda,
            };
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", row.csv())?;
            }
            rows.push(row);
        }
        let last = epoch + 1 == tc.epochs;
        if !val.is_empty() && ((epoch + 1) % tc.val_every == 0 || last) {
            let dice = validate(&state.params, cfg, val, tc.zscore)?.mean(Metric::Dice);
            if dice > best.0 {
                best = (dice, state.params.clone(), epoch + 1);
            }
        }
    }
    if val.is_empty() {
        best = (f64::NAN, state.params.clone(), tc.epochs);
    }
    Ok(FitResult {
        state,
        best: best.1,
        best_dice: best.0,
        best_epoch: best.2,
        log: rows,
    })
}
