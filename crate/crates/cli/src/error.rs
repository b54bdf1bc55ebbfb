use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] relcirc_core::Error),

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("sweep: {0}")]
    Sweep(String),
}

impl CliError {
    /// Module tag printed in front of the message.
    pub fn module(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.module(),
            CliError::Csv { .. } | CliError::Io { .. } | CliError::Json { .. } => "io",
            CliError::Argument(_) => "cli",
            CliError::Sweep(_) => "sweep",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
