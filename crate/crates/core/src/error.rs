use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed trace: {0}")]
    Format(String),

    #[error("trace integrity violated: {0}")]
    Integrity(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate audio span: {0}")]
    DegenerateSpan(String),

    #[error("spectrum was built from {expected} samples, asked to invert to {requested}")]
    LengthMismatch { expected: usize, requested: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("budget {budget} cannot cover {required} mandatory tokens")]
    BudgetTooSmall { budget: usize, required: usize },

    #[error("head ({layer}, {head}) has capacity {capacity} below the recent window {recent}")]
    CapacityBelowRecent {
        layer: usize,
        head: usize,
        capacity: usize,
        recent: usize,
    },

    #[error("horizon error: {0}")]
    Horizon(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Output {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True when the failure is attributable to bad inputs or usage rather
    /// than to the pipeline itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Format(_)
                | Error::Integrity(_)
                | Error::Parse { .. }
                | Error::InvalidConfig(_)
        )
    }
}
