use std::path::PathBuf;

use rlpo_core::RlpoError;
use thiserror::Error;

pub type RunResult<T> = Result<T, RunError>;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),

    #[error("step {step} (episode {episode}, t {t}) failed: {source}")]
    Step {
        step: usize,
        episode: usize,
        t: usize,
        #[source]
        source: Box<RunError>,
    },

    #[error("no feedback for step {step} within {timeout_s} s")]
    FeedbackTimeout { step: usize, timeout_s: f64 },

    #[error("cannot resume {dir}: {reason}")]
    Resume { dir: PathBuf, reason: String },

    #[error("run stopped")]
    Stopped,

    #[error(transparent)]
    Core(#[from] RlpoError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}
