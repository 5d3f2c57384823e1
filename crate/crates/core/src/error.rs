use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the steering pipeline.
#[derive(Debug, Error)]
pub enum MeraError {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("infeasible steering problem: {0}")]
    Infeasible(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bundle file missing: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("malformed JSON in {}: {source}", path.display())]
    MalformedJson {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("size mismatch in {file}: expected {expected} bytes, found {actual}")]
    SizeMismatch { file: String, expected: u64, actual: u64 },

    #[error("unknown dtype tag {0:?}")]
    UnknownDtype(String),

    #[error("unsupported bundle version {0}")]
    UnsupportedVersion(u32),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl MeraError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    /// Stable machine-readable code, one per failure class.
    pub fn code(&self) -> &'static str {
        match self {
            Self::Validation(_) => "validation",
            Self::Infeasible(_) => "infeasible",
            Self::Optimization(_) => "optimization",
            Self::Shape(_) => "shape_mismatch",
            Self::MissingFile(_) => "missing_file",
            Self::MalformedJson { .. } => "malformed_json",
            Self::SizeMismatch { .. } => "size_mismatch",
            Self::UnknownDtype(_) => "unknown_dtype",
            Self::UnsupportedVersion(_) => "unsupported_version",
            Self::Io(_) => "io",
            Self::Json(_) => "json",
        }
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Validation(_)
                | Self::Shape(_)
                | Self::Infeasible(_)
                | Self::MissingFile(_)
                | Self::MalformedJson { .. }
                | Self::SizeMismatch { .. }
                | Self::UnknownDtype(_)
                | Self::UnsupportedVersion(_)
        )
    }
}

pub type Result<T, E = MeraError> = std::result::Result<T, E>;
