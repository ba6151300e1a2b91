use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Process exit status for validation failures.
pub const EXIT_VALIDATION: i32 = 2;
/// Process exit status for compute and I/O failures.
pub const EXIT_COMPUTE: i32 = 3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{0}")]
    Compute(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) => EXIT_VALIDATION,
            _ => EXIT_COMPUTE,
        }
    }

    pub(crate) fn io(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
        move |source| Error::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn json(path: &Path) -> impl FnOnce(serde_json::Error) -> Error + '_ {
        move |source| Error::Json { path: path.to_path_buf(), source }
    }

    pub fn compute(e: impl std::fmt::Display) -> Error {
        Error::Compute(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
