use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

/// Failures reading or writing tensors and images.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor container (bad magic bytes)")]
    BadMagic,
    #[error("tensor container truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("tensor container has {extra} bytes after the payload")]
    TrailingData { extra: usize },
    #[error("tensor shape has no dimensions")]
    EmptyShape,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("malformed {kind} header: {reason}")]
    MalformedHeader { kind: &'static str, reason: String },
    #[error("label {value} is not a class index below {num_classes} and not 255")]
    InvalidClassIndex { value: u8, num_classes: usize },
    #[error(transparent)]
    Core(afa_core::Error),
}

impl From<afa_core::Error> for FormatError {
    fn from(e: afa_core::Error) -> Self {
        match e {
            afa_core::Error::EmptyShape => FormatError::EmptyShape,
            afa_core::Error::NonFinite { index } => FormatError::NonFinite { index },
            afa_core::Error::InvalidClassIndex { value, num_classes } => {
                FormatError::InvalidClassIndex { value, num_classes }
            }
            other => FormatError::Core(other),
        }
    }
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FormatError::Io {
            path: path.into(),
            source,
        }
    }
}
