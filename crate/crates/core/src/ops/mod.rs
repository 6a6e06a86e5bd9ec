//! Differentiable operations recorded on a [`Graph`](crate::graph::Graph).

mod attention;
mod basic;
mod conv;
mod loss;
mod norm;
mod pool;
mod resample;

pub use conv::ConvSpec;
pub use norm::{BatchStats, BnStats};
