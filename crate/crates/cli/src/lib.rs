//! Experiment driver: configuration, subcommands, reports.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod report;

pub use commands::{run, Command, Outcome};
pub use config::ExperimentConfig;
pub use report::{CliError, ErrorCode, RunManifest};
