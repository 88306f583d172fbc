use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("point is outside the support of the transformed distribution (residual {residual:.3e} > tolerance {tolerance:.3e})")]
    OutOfSupport { residual: f64, tolerance: f64 },

    #[error("map is rank deficient: {0}")]
    RankDeficient(String),

    #[error("inversion failed: {0}")]
    Inversion(String),

    #[error("non-finite value in batch entry {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite sampler state at step {step}")]
    NonFiniteState { step: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
