mod common;

use pfda_core::adaptation::StudyMode;
use pfda_core::losses::LossWeights;
use pfda_core::model::{ForwardCtx, Mode, ModelConfig};
use pfda_core::params::ParamStore;
use pfda_core::train::{build_objective, DomainBatch, LossBreakdown, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAMBDA: f64 = 0.7;
const H: f64 = 1e-5;
// absolute noise of a central difference at this step is about 1e-10
const FLOOR: f64 = 1e-5;

fn losses(params: &ParamStore, batch: &DomainBatch, cfg: &ModelConfig, tc: &TrainConfig) -> LossBreakdown {
    let mut ctx = ForwardCtx::new(params, Mode::Train, false);
    let obj = build_objective(&mut ctx, batch, cfg, tc, LAMBDA, None).unwrap();
    obj.breakdown(&ctx)
}

/// The scalar whose derivative the backward pass computes for `name`.
/// Parameters feeding the gradient reversal see the adversarial term with
/// factor `-λ`; the domain head sees it unreversed.
fn surrogate(name: &str, l: &LossBreakdown, w: &LossWeights) -> f64 {
    let adv_factor = if name.starts_with("domain.") { 1.0 } else { -LAMBDA };
    l.seg + adv_factor * w.alpha_adv * l.adv + w.beta_mmd * l.mmd2
}

#[test]
fn full_model_gradients_match_central_differences() {
    let cfg = common::tiny_config();
    let cases = common::tiny_cases(2);
    let batch = common::tiny_batch(&cases);
    let tc = TrainConfig {
        // larger adaptation weights so those branches carry visible gradient
        weights: LossWeights {
            alpha_adv: 1.0,
            beta_mmd: 1.0,
            ..Default::default()
        },
        ..common::train_config(StudyMode::GrlMmd)
    };
    let w = tc.effective_weights();

    let mut checked = 0;
    let mut kinks = 0;
    let mut worst: f64 = 0.0;
    let mut groups = std::collections::BTreeSet::new();
    for init_seed in [3u64, 4] {
        let params = ParamStore::init(&cfg, init_seed).unwrap();
        let grads = {
            let mut ctx = ForwardCtx::new(&params, Mode::Train, true);
            let obj = build_objective(&mut ctx, &batch, &cfg, &tc, LAMBDA, None).unwrap();
            ctx.param_grads(obj.total)
        };
        let names: Vec<&String> = params.params().keys().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11 + init_seed);
        for _ in 0..25 {
            let name = names[rng.gen_range(0..names.len())];
            let idx = rng.gen_range(0..params.get(name).unwrap().len());
            let analytic = grads.get(name.as_str()).map_or(0.0, |g| g.data()[idx]);
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[idx] += delta;
                surrogate(name, &losses(&p, &batch, &cfg, &tc), &w)
            };
            let central = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
            let numeric = central(H);
            // a ReLU or max-pool switch inside [-h, h] makes the difference
            // quotient depend on h; such samples say nothing about the gradient
            let half = central(H / 2.0);
            if (numeric - half).abs() > 1e-6 * numeric.abs().max(FLOOR) {
                kinks += 1;
                continue;
            }
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            assert!(
                rel < 1e-5,
                "{name}[{idx}]: analytic {analytic:e} vs numeric {numeric:e} (rel {rel:e})"
            );
            worst = worst.max(rel);
            groups.insert(name.split('.').next().unwrap().to_string());
            checked += 1;
        }
    }
    assert!(checked >= 20, "only {checked} kink-free samples ({kinks} skipped)");
    eprintln!("checked {checked} parameters across {groups:?} ({kinks} kinks skipped), worst relative error {worst:e}");
}
