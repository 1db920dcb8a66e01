use std::path::PathBuf;

use thiserror::Error;

use crate::maxent::IterationRecord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid gridworld spec: {0}")]
    InvalidSpec(String),

    #[error("invalid perturbation: {0}")]
    InvalidPerturbation(String),

    #[error("invalid MDP: {0}")]
    InvalidMdp(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("usage error: {0}")]
    Usage(String),

    /// Raised when the objective becomes non-finite. Carries every record
    /// produced before the failing iteration.
    #[error("training diverged at iteration {iteration}")]
    TrainingDiverged {
        iteration: usize,
        trace: Vec<IterationRecord>,
    },

    #[error("instance too large for exhaustive enumeration: {0}")]
    TooLarge(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{label}: file not found: {path}")]
    MissingFile { label: String, path: PathBuf },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
