//! File formats, configuration and stage commands for the `mbslam` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod json;

pub use commands::{Context, Logger};
pub use config::ExperimentConfig;
pub use error::{CliError, Result};
