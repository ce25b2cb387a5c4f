//! Experiment harness: configuration, synthetic tasks, training loops,
//! checkpoints, metrics and the work behind each `kdqat` subcommand.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod optim;
pub mod task;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use train::RunCtx;
