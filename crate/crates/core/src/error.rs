//! Error type shared by the whole crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {found:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("index {index} out of range ({len} units)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("input bound violation: {0}")]
    BoundViolation(String),

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("direct propagation cap exceeded: layer has {units} units, cap is {cap}; use the factored path")]
    SizeCapExceeded { units: usize, cap: usize },

    #[error("training diverged at iteration {iteration}: loss is not finite")]
    TrainingDiverged { iteration: usize },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("unsupported layer kind `{0}`")]
    UnsupportedKind(String),

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("undefined score: {0}")]
    Undefined(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
