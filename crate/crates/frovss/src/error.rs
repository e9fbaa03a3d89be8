//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by any pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (bad field values, malformed templates,
    /// mismatched dimensions declared up front).
    #[error("config error: {0}")]
    Config(String),

    /// Model/shape mismatch discovered at run time (weights vs inputs).
    #[error("model error: {0}")]
    Model(String),

    /// Dataset content failed validation (checksums, missing files,
    /// undecodable images).
    #[error("data error: {message}{}", path.as_ref().map(|p| format!(" ({})", p.display())).unwrap_or_default())]
    Data {
        message: String,
        path: Option<PathBuf>,
    },

    /// Training diverged; carries the last iteration that was healthy.
    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged { iteration: u64, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub fn data(msg: impl Into<String>, path: Option<PathBuf>) -> Self {
        Error::Data {
            message: msg.into(),
            path,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
