//! Crate-wide error type.

use std::fmt;
use std::path::PathBuf;

/// Errors surfaced by the recommender core.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape { op: &'static str, detail: String },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// Invalid run configuration; the message names the violated invariant.
    Config(String),
    /// A dataset row does not match the declared schema.
    Schema { line: usize, message: String },
    /// Filesystem failure, tagged with the offending path.
    Io { path: PathBuf, source: std::io::Error },
    /// Training produced a non-finite loss.
    NanLoss { batch: usize },
    /// A gradient fed to the optimizer contained a non-finite value.
    NanGrad { param: String },
    /// Malformed or missing checkpoint file.
    Checkpoint(String),
    /// Requested user id is not present in the dataset.
    UnknownUser(u64),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Schema { line, message } => write!(f, "schema error at row {line}: {message}"),
            Error::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            Error::NanLoss { batch } => write!(f, "non-finite loss in batch {batch}"),
            Error::NanGrad { param } => write!(f, "non-finite gradient for parameter {param}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::UnknownUser(user) => write!(f, "unknown user id {user}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
