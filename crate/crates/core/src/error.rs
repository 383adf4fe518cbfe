use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A space, surface, manifest or run document failed validation.
    #[error("schema error: {0}")]
    Schema(String),

    /// An argument is outside the domain of the operation.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A documented precondition of the operation does not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("search space of {size} configurations exceeds the limit of {limit}")]
    SpaceTooLarge { size: u128, limit: u128 },

    #[error("{path}:{line}: corrupt archive record: {reason}")]
    CorruptArchive {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),

    #[error("evaluator failed: {0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
