use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RlpoError>;

#[derive(Debug, Error)]
pub enum RlpoError {
    #[error("invalid value for `{field}`: {reason}")]
    Validation { field: &'static str, reason: String },

    #[error("shape mismatch at {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("unknown keyword `{0}`")]
    UnknownKeyword(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch} (last finite loss {last_finite_loss:?})")]
    Divergence {
        epoch: usize,
        last_finite_loss: Option<f64>,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("describer failed on image {image}, question {question:?}: {reason}")]
    Describer {
        image: usize,
        question: String,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RlpoError {
    pub fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        RlpoError::Validation {
            field,
            reason: reason.into(),
        }
    }

    pub fn shape(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        RlpoError::Shape {
            context: context.into(),
            expected,
            actual,
        }
    }
}
