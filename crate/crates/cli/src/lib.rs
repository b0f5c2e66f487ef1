//! Command-line driver: data generation, training, evaluation and
//! self-checks over one TOML run configuration.

pub mod check;
pub mod commands;
pub mod config;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_CHECK: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const WORKERS_ENV: &str = "PICRL_WORKERS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("checks failed: {0}")]
    Check(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error(transparent)]
    Core(#[from] picrl_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Check(_) => EXIT_CHECK,
            CliError::Diverged(_) => EXIT_DIVERGED,
            _ => EXIT_USAGE,
        }
    }
}
