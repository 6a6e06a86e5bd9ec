#![allow(dead_code)]

use pfda_core::adaptation::StudyMode;
use pfda_core::data::{generate_phantoms, Case, PhantomSpec, Split, SOURCE_SITE, TARGET_SITE};
use pfda_core::model::ModelConfig;
use pfda_core::train::{DomainBatch, TrainConfig};

pub fn tiny_cases(n: usize) -> Vec<Case> {
    let spec = PhantomSpec {
        train_per_site: n,
        val_per_site: 1,
        side: 16,
        seed: 7,
        ..Default::default()
    };
    generate_phantoms(&spec).unwrap()
}

pub fn split<'a>(cases: &'a [Case], site: &str, split: Split) -> Vec<&'a Case> {
    cases.iter().filter(|c| c.site == site && c.split == split).collect()
}

pub fn tiny_batch(cases: &[Case]) -> DomainBatch {
    let src = split(cases, SOURCE_SITE, Split::Train);
    let tgt = split(cases, TARGET_SITE, Split::Train);
    DomainBatch::from_cases(&src[..2], &tgt[..2], true)
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig::tiny()
}

pub fn train_config(study: StudyMode) -> TrainConfig {
    TrainConfig {
        study,
        zscore: true,
        ..Default::default()
    }
}
