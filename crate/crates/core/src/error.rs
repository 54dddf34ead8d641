use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FipError>;

#[derive(Debug, Error)]
pub enum FipError {
    /// Caller passed an argument outside the operation's domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    /// A NaN/Inf showed up in a loss, gradient or parameter.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Binary or manifest parse failure. `field` names the offending header field.
    #[error("format error in {path}: field `{field}` at byte {offset}: {reason}")]
    Format {
        path: PathBuf,
        field: String,
        offset: u64,
        reason: String,
    },

    #[error("dataset error (sample {sample}): {reason}")]
    Dataset { sample: String, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl FipError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        FipError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FipError::Io {
            path: path.into(),
            source,
        }
    }
}
