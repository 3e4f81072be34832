use std::io;

use thiserror::Error;

pub type Result<T, E = MeaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MeaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An operation was called in the wrong lifecycle state (e.g. eval-mode
    /// batch norm before any training step).
    #[error("state error: {0}")]
    State(String),

    #[error("numerical failure after {iterations} iterations (relative residual {residual:.3e}): {context}")]
    NumericalFailure {
        context: String,
        iterations: usize,
        residual: f64,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    /// Carries the last checkpoint whose losses were all finite, if any.
    #[error("training diverged at epoch {epoch}: {reason}")]
    TrainingFailure {
        epoch: usize,
        reason: String,
        last_good: Option<Box<crate::nn::Checkpoint>>,
    },

    #[error("malformed {format} data: {reason}")]
    Format {
        format: &'static str,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MeaError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MeaError::InvalidArgument(msg.into())
    }

    pub(crate) fn format(format: &'static str, reason: impl Into<String>) -> Self {
        MeaError::Format {
            format,
            reason: reason.into(),
        }
    }
}
