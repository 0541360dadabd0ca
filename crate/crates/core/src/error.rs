use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transmission below floor {floor} at {count} element(s); inversion is singular")]
    Singular { floor: f64, count: usize },

    #[error("training diverged{}: {reason}", .step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Divergence {
        step: Option<u64>,
        reason: String,
        last_finite: Option<String>,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 validation, 2 divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::Config(_)
            | Error::Singular { .. }
            | Error::Format { .. } => 1,
            Error::Divergence { .. } => 2,
            Error::Io { .. } | Error::Image { .. } => 3,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }
}
