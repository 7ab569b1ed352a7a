use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FslmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FslmError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("simulation diverged at t = {time_ms} ms")]
    SimulationDiverged { time_ms: f64 },

    #[error("model produced non-finite values: {0}")]
    ModelCorrupt(String),

    #[error("training diverged at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("rejection sampler acceptance rate {rate:.3e} below {min:.0e}; consider MCMC")]
    EnvelopeFailure { rate: f64, min: f64 },

    #[error("restricted prior acceptance rate {rate:.3e} below {min:.0e}")]
    RestrictedPriorFailure { rate: f64, min: f64 },

    #[error("empty feature set")]
    EmptyKeep,

    #[error("feature index {index} out of range for dimension {dim}")]
    BadIndex { index: usize, dim: usize },

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("labels contain a single class")]
    SingleClass,

    #[error("no valid rows in dataset")]
    NoValidRows,

    #[error("{path}: bad file format: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: checksum mismatch")]
    Checksum { path: PathBuf },

    #[error("{path}: unsupported format version {found} (expected {expected})")]
    Version { path: PathBuf, found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FslmError {
    pub fn config(msg: impl Into<String>) -> Self {
        FslmError::Config(msg.into())
    }
}
