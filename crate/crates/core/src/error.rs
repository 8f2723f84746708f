use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),

    #[error("invalid checkpoint: {0}")]
    Invalid(String),

    #[error("missing tensor {0:?}")]
    MissingTensor(String),

    #[error("shape mismatch for tensor {name:?}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<u64>,
        found: Vec<u64>,
    },

    #[error("schema fingerprint mismatch: expected {expected:016x}, found {found:016x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("non-finite value in {name:?} at index {index}")]
    NonFinite { name: String, index: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },

    #[error("refusing to overwrite existing output {0} (pass --overwrite)")]
    OutputExists(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
            Error::Invalid(_) => "invalid_checkpoint",
            Error::MissingTensor(_) => "missing_tensor",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::FingerprintMismatch { .. } => "fingerprint_mismatch",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::Numeric(_) => "numeric",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Pattern { .. } => "pattern",
            Error::OutputExists(_) => "output_exists",
        }
    }

    /// Process exit code: 2 usage, 3 data/format, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Pattern { .. } | Error::OutputExists(_) => 2,
            Error::NonFinite { .. } | Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}
