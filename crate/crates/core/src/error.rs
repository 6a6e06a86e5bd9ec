use std::io;

use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("crop box out of bounds on axis {axis}: origin {origin} + size {size} > extent {extent}")]
    Bounds {
        axis: char,
        origin: usize,
        size: usize,
        extent: usize,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),

    #[error("surface undefined: {0}")]
    SurfaceUndefined(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
