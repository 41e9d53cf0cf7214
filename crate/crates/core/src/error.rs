use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mask has no foreground voxels")]
    EmptyForeground,
    #[error("volume {volume:?} is smaller than crop {crop:?}")]
    UndersizedVolume { volume: Vec<usize>, crop: Vec<usize> },
    #[error("spatial extents {extents:?} must be multiples of {multiple}")]
    Divisibility { extents: Vec<usize>, multiple: usize },
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("digest mismatch for {0}")]
    Digest(PathBuf),
    #[error("generator gave up after {0} attempts")]
    GeneratorExhausted(usize),
    #[error("refusing to overwrite existing {0} (pass --force)")]
    Exists(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable, machine-parsable category used in CLI error lines and FFI status codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::Divisibility { .. } => "shape",
            Error::UndersizedVolume { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::InvalidArgument(_) | Error::EmptyForeground => "invalid_argument",
            Error::Format { .. } | Error::Digest(_) | Error::Json(_) => "format",
            Error::GeneratorExhausted(_) => "generator",
            Error::Exists(_) => "exists",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
