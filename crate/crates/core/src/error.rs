use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CcdError>;

#[derive(Debug, Error)]
pub enum CcdError {
    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("missing file: {}", .0.display())]
    MissingPath(PathBuf),

    #[error("query ({x:.3}, {y:.3}) lies outside the road surface")]
    OutOfMap { x: f64, y: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("simulation diverged: {0}")]
    Diverged(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("config hash mismatch for {0}")]
    HashMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl CcdError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CcdError::Invalid(msg.into())
    }

    /// Errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            CcdError::Invalid(_) | CcdError::MissingPath(_) | CcdError::TomlDe(_) | CcdError::Format { .. } | CcdError::HashMismatch(_)
        )
    }
}
