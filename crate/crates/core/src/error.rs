use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's preconditions (shape, range, parity).
    #[error("contract violation: {0}")]
    Contract(String),

    /// The frame operator is singular, so no dual frame exists.
    #[error("frame operator is not invertible (lower frame bound {lower_bound:e})")]
    NonInvertible { lower_bound: f64 },

    #[error("group action {action} is not supported by the {family} frame")]
    UnsupportedGroup { action: String, family: String },

    /// Least-squares steering fit exceeded the steerability threshold.
    #[error("frame not steerable at tau={tau:?}: residual {residual:e}")]
    NotSteerable { tau: Vec<f64>, residual: f64 },

    #[error("parse error at position {position} near '{token}': {message}")]
    Parse {
        position: usize,
        token: String,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract<T>(message: impl Into<String>) -> Result<T> {
    Err(Error::Contract(message.into()))
}
