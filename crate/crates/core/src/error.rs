use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or matrix dimension did not line up.
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        axis: &'static str,
        expected: String,
        actual: String,
    },

    /// A hyperparameter or argument outside its allowed range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// Input data that is well formed but semantically invalid.
    #[error("validation failed: {0}")]
    Validation(String),

    /// An API call made in the wrong order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("weight archive rejected: {}", .0.join("; "))]
    Archive(Vec<String>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },

    /// A cross-validation fold failed at a named stage.
    #[error("fold {fold}, stage {stage}: {source}")]
    Fold {
        fold: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        axis: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            op,
            axis,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
