use std::io;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum SaapError {
    #[error("shape mismatch: {lhs} vs {rhs}")]
    ShapeMismatch { lhs: String, rhs: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad magic: expected SAAPTNS1, found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported format version {0:?}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {found} (expected {expected})")]
    BadDtype { found: u32, expected: u32 },

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SaapError {
    pub(crate) fn shape(lhs: impl Into<String>, rhs: impl Into<String>) -> Self {
        SaapError::ShapeMismatch { lhs: lhs.into(), rhs: rhs.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SaapError::InvalidArgument(msg.into())
    }

    /// Short machine-readable kind, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            SaapError::ShapeMismatch { .. } => "shape_mismatch",
            SaapError::InvalidArgument(_) => "invalid_argument",
            SaapError::NonFinite(_) => "non_finite",
            SaapError::Empty(_) => "empty",
            SaapError::BadMagic { .. } => "bad_magic",
            SaapError::UnsupportedVersion(_) => "unsupported_version",
            SaapError::BadDtype { .. } => "bad_dtype",
            SaapError::Truncated { .. } => "truncated",
            SaapError::Malformed(_) => "malformed",
            SaapError::Diverged(_) => "diverged",
            SaapError::Io(_) => "io",
        }
    }
}

pub type Result<T, E = SaapError> = std::result::Result<T, E>;
