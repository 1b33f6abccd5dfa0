use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PGM {path}: {reason}")]
    Pgm { path: PathBuf, reason: String },

    #[error("malformed matrix dump: {0}")]
    MatrixFormat(String),

    #[error("no frames found in {0}")]
    NoFrames(PathBuf),

    #[error("frame dimension mismatch: expected {expected:?}, found {found:?} ({path})")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
        path: PathBuf,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image has no structure to register against")]
    NoStructure,

    #[error("image has fewer than two distinct gray levels; no threshold exists")]
    NoThreshold,

    #[error("empty region")]
    EmptyRegion,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
