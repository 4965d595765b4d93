//! Experiment runner for hamflow: configuration, the inspect / manifold /
//! turnpike / simulate pipelines and their file outputs.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::RunOptions;
pub use config::ExperimentConfig;
pub use error::CliError;
