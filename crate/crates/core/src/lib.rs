//! Domain-adaptive 3D segmentation: a CNN + transformer encoder-decoder
//! with gradient-reversal and MMD feature alignment, trained on a small
//! reverse-mode autodiff engine in `f64`.

pub mod adaptation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod params;
pub mod phantom;
pub mod stats;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use graph::{Graph, Gradients, Var};
pub use tensor::Tensor;
