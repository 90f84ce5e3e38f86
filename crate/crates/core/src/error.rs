use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Caller supplied inconsistent arguments or configuration.
    Config,
    /// Input files or in-memory data violate their invariants.
    Data,
    /// A computation produced a non-finite or undefined value.
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic {found:?} in {path} (expected \"LGCV\")")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("unsupported matrix format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated matrix file {path}: expected {expected} payload bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("unknown id {id:?} (not present in {context})")]
    MissingId { id: String, context: String },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("non-finite loss or gradient at epoch {epoch}")]
    Diverged { epoch: usize },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Config,
            Error::ZeroNorm(_) | Error::Degenerate(_) | Error::Diverged { .. } => {
                ErrorClass::Numeric
            }
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn missing(id: impl Into<String>, context: impl Into<String>) -> Self {
        Error::MissingId {
            id: id.into(),
            context: context.into(),
        }
    }
}
