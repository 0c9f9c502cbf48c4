//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform to the primitive being applied.
    #[error("shape mismatch in `{primitive}`: {details}")]
    ShapeMismatch { primitive: &'static str, details: String },

    /// Primitive/attribute combination the engine does not implement.
    #[error("unsupported primitive: {0}")]
    UnsupportedPrimitive(String),

    /// A caller broke an API contract (non-scalar loss, empty mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tag id outside the configured vocabulary.
    #[error("tag id {id} out of range for vocabulary of size {vocab_size}")]
    Vocabulary { id: u32, vocab_size: usize },

    /// Parameter store does not match the expected schema.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Invalid or inconsistent configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A loss or activation became non-finite during training.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Malformed record in a dataset or vocabulary file.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for validation/config problems,
    /// 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. }
            | Error::UnsupportedPrimitive(_)
            | Error::Contract(_)
            | Error::Vocabulary { .. }
            | Error::Parameter(_)
            | Error::Config(_)
            | Error::Parse { .. } => 1,
            Error::NonFinite(_) | Error::Checkpoint(_) | Error::Data(_) | Error::Io(_) => 2,
        }
    }

    /// Machine-parsable category used as the CLI error prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::UnsupportedPrimitive(_) => "unsupported",
            Error::Contract(_) => "contract",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Parameter(_) => "parameter",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "nonfinite",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::Data(_) => "data",
            Error::Io(_) => "io",
        }
    }
}
