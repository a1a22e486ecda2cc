use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MitosError>;

#[derive(Debug, Error)]
pub enum MitosError {
    #[error("{op}: shape mismatch, expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward called on a tape that was already consumed")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("{path}: line {line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("unsupported {what} version {found} (expected {expected})")]
    Version {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),
}

impl MitosError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        MitosError::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MitosError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MitosError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by numeric failure rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, MitosError::NonFiniteLoss { .. })
    }
}
