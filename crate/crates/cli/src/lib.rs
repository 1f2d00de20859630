//! Experiment runner around the `lowbit` training library: configuration,
//! checkpoints, metrics files and the `pretrain`/`quantize`/`eval`/`plan`
//! commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use checkpoint::{Checkpoint, Position};
pub use config::{ExperimentConfig, ModelKind, DATA_DIR_ENV};
pub use error::{CliError, Result};
