//! CLI-level errors with distinct exit codes per failure class.

use std::path::Path;

use ctp_core::CtpError;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Malformed config or artifact file, unknown keys, bad shapes.
    #[error("schema error: {0}")]
    Schema(String),
    /// A required upstream artifact is missing.
    #[error("dependency error: {0}")]
    Dependency(String),
    /// An upstream artifact no longer matches the recorded fingerprint.
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error(transparent)]
    Core(#[from] CtpError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Stable nonzero exit codes per failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Dependency(_) => 3,
            CliError::Core(CtpError::NumericFailure(_)) | CliError::Core(CtpError::Divergence { .. }) => 4,
            CliError::Core(CtpError::IdentificationFailure(_)) => 5,
            CliError::Stale(_) => 6,
            CliError::Io { .. } => 7,
            CliError::Core(_) => 2,
        }
    }
}
