use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("unknown body part `{0}`")]
    UnknownPart(String),

    #[error("unknown action class `{0}`")]
    UnknownClass(String),

    #[error("layout table line {line}: {reason}")]
    Layout { line: usize, reason: String },

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint incompatible with config; mismatched parameters: {}", .0.join(", "))]
    IncompatibleCheckpoint(Vec<String>),

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NumericalAbort { step: usize, batch_seed: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(arg: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { arg, reason: reason.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code: 1 validation, 2 I/O, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } => 2,
            Error::NumericalAbort { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
