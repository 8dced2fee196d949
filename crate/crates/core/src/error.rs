//! Error type shared by every module of the kit.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data or a violated precondition.
    Data,
    /// The optimisation produced a non-finite value.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("malformed manifest in {}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },

    #[error("payload length mismatch in {}: expected {expected} bytes, found {found}", path.display())]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("record `{id}`: component {index} is not finite")]
    NonFinite { id: String, index: usize },

    #[error("duplicate record id `{0}`")]
    DuplicateId(String),

    #[error("record `{id}`: {msg}")]
    InvalidRecord { id: String, msg: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("record `{0}` has (near) zero norm")]
    ZeroNorm(String),

    #[error("record `{0}` collapses to zero norm under the projection")]
    Collapse(String),

    #[error("record `{id}` is not unit norm (norm {norm})")]
    NotUnitNorm { id: String, norm: f64 },

    #[error("group (attribute {attribute}, class {class}) has no records")]
    EmptyGroup { attribute: usize, class: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-finite loss or gradient at step {step}")]
    NonFiniteStep { step: usize },

    #[error("projection matrix has a non-finite entry at ({row}, {col})")]
    NonFiniteMatrix { row: usize, col: usize },

    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("zip error in {}: {source}", path.display())]
    Zip {
        path: PathBuf,
        #[source]
        source: zip::result::ZipError,
    },

    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFiniteStep { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
