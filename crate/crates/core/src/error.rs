use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("time index {t} outside [{lo}, {hi}]")]
    TimeRange { t: usize, lo: usize, hi: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("batch too small: need at least {need} vectors, got {got}")]
    BatchSize { need: usize, got: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("checkpoint magic mismatch: expected \"DLAB\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },

    #[error("checkpoint is inconsistent: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}:{line}: {msg}")]
    Config { path: PathBuf, line: usize, msg: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
