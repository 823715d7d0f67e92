use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or configuration, detected before any compute.
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value {value} out of range: {context}")]
    Range { value: i64, context: String },

    #[error("sample {sample_id} failed validation: {violations:?}")]
    Validation {
        sample_id: String,
        violations: Vec<String>,
    },

    #[error("dataset error for sample {sample_id}: {reason}")]
    Dataset { sample_id: String, reason: String },

    #[error("checkpoint architecture hash {found} does not match expected {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("rule file error at line {line}: {reason}")]
    Rules { line: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// True for failures caused by the filesystem or malformed files rather
    /// than by the content being checked.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. } | Error::Format { .. })
    }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
