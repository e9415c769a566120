//! Experiment driver: configuration, sweeps and deterministic reports.

pub mod commands;
pub mod config;
pub mod report;

use std::path::PathBuf;

pub use commands::{cmd_riemann_check, cmd_run, cmd_sweep, cmd_verify_bounds, cmd_verify_lemmas, Context, Outcome};
pub use config::{parse_config, parse_str, ConfigError, ExperimentConfig, InitialCondition};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] particle_pde::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Setup(String),
}

pub type Result<T> = std::result::Result<T, CliError>;
