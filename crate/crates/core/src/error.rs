use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum BuffError {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Grid or tensor dimensions are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// A stage prerequisite is missing on disk.
    #[error("missing artifact {}: {reason}", path.display())]
    MissingArtifact { path: PathBuf, reason: String },

    /// A persisted file is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Another stage holds the artifact directory.
    #[error("artifact directory is locked by {}; remove it if no stage is running", path.display())]
    Locked { path: PathBuf },

    /// One or more self-check invariants failed.
    #[error("self-check failed: {failed} of {total} checks")]
    SelfCheck { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, BuffError>;

pub(crate) fn shape_err(msg: impl Into<String>) -> BuffError {
    BuffError::Shape(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> BuffError {
    BuffError::Config(msg.into())
}

pub(crate) fn domain_err(msg: impl Into<String>) -> BuffError {
    BuffError::Domain(msg.into())
}
