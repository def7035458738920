//! Runtime for RLPO runs: configuration, the run loop, persistence,
//! evaluation reports and the HTTP service.

pub mod artifacts;
pub mod config;
pub mod engine;
pub mod error;
pub mod feedback;
pub mod record;
pub mod report;
pub mod server;

pub use config::{FeedbackMode, RunConfig};
pub use error::{RunError, RunResult};
