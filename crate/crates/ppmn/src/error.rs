use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ppmn_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("gradient check failed: worst relative error {worst:.3e} exceeds {tolerance:.1e}")]
    GradCheckFailed { worst: f64, tolerance: f64 },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

/// Process exit codes: 0 success, 1 validation error, 2 numerical failure.
pub fn exit_code(err: &CliError) -> i32 {
    match err {
        CliError::GradCheckFailed { .. } => 2,
        CliError::Core(ppmn_core::Error::Divergence { .. }) => 2,
        _ => 1,
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
