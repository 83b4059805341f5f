use std::path::{Path, PathBuf};

use autotask::checkpoint::CheckpointError;
use autotask::data::DataError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid {key}: {reason}")]
    Key { key: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    ConfigFile { path: PathBuf, line: usize, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] autotask::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl CliError {
    pub fn key(key: &str, reason: impl Into<String>) -> Self {
        CliError::Key {
            key: key.to_string(),
            reason: reason.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for bad input or configuration, 2 for run-time and numeric failures.
    pub fn exit_code(&self) -> u8 {
        let validation = match self {
            CliError::Key { .. } | CliError::ConfigFile { .. } | CliError::Usage(_) => true,
            CliError::Core(e) => e.is_validation(),
            CliError::Data(e) => e.is_validation(),
            CliError::Checkpoint(e) => e.is_validation(),
            CliError::Io { .. } | CliError::GradCheck(_) => false,
        };
        if validation {
            1
        } else {
            2
        }
    }
}
