use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index out of range: {0}")]
    OutOfRange(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("pipeline order violated: {0}")]
    Pipeline(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing arrays: {}", .0.join(", "))]
    MissingArrays(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("frozen parameters changed: {0}")]
    FrozenDrift(String),
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable, machine-parsable class name for CLI error reporting.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::OutOfRange(_) => "out-of-range",
            Error::NonFinite(_) => "non-finite",
            Error::Pipeline(_) => "pipeline",
            Error::Format(_) => "format",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArrays(_) => "missing-arrays",
            Error::Config(_) => "config",
            Error::FrozenDrift(_) => "frozen-drift",
            Error::Aborted(_) => "aborted",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
