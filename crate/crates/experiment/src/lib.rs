//! Config-driven experiments on top of `pfda-core`: single runs, the
//! study × loss-ratio ablation grid, paired run comparison, surface-distance
//! exports and feature-consistency analysis.

pub mod compare;
pub mod config;
pub mod error;
pub mod export;
pub mod features;
pub mod grid;
pub mod probe;
pub mod run;
pub mod table;

pub use config::{ExperimentConfig, Ratio};
pub use error::{Error, Result};
