use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the segmentation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Input does not follow the expected on-disk layout.
    #[error("format error: {0}")]
    Format(String),
    /// Payload shorter or longer than the header announces.
    #[error("length error: expected {expected} bytes of payload, found {found}")]
    Length { expected: usize, found: usize },
    #[error("unsupported version: found {found}, expected {expected}")]
    Version { found: i32, expected: i32 },
    /// Value violates a documented invariant (finiteness, label set, range).
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    /// Image too small for the requested operation.
    #[error("size error: {0}")]
    Size(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    /// Autodiff graph used out of order (double backward, detached loss).
    #[error("graph state error: {0}")]
    State(String),
    /// Training diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
