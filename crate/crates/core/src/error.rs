use std::fmt;

use thiserror::Error;

/// Stable error codes for the feature-bank and checkpoint readers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    VersionMismatch,
    Truncated,
    IdOutOfRange,
    TrailingBytes,
    Malformed,
}

impl FormatErrorKind {
    pub fn code(self) -> u32 {
        match self {
            FormatErrorKind::BadMagic => 1,
            FormatErrorKind::VersionMismatch => 2,
            FormatErrorKind::Truncated => 3,
            FormatErrorKind::IdOutOfRange => 4,
            FormatErrorKind::TrailingBytes => 5,
            FormatErrorKind::Malformed => 6,
        }
    }
}

impl fmt::Display for FormatErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            FormatErrorKind::BadMagic => "bad magic",
            FormatErrorKind::VersionMismatch => "version mismatch",
            FormatErrorKind::Truncated => "truncated",
            FormatErrorKind::IdOutOfRange => "class id out of range",
            FormatErrorKind::TrailingBytes => "trailing bytes",
            FormatErrorKind::Malformed => "malformed",
        };
        write!(f, "{name} (code {})", self.code())
    }
}

#[derive(Debug, Error)]
pub enum SecaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("adapter pool is empty")]
    EmptyPool,
    #[error("unknown class id {0}")]
    UnknownClass(usize),
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("missing prompt for task {0}")]
    MissingPrompt(usize),
    #[error("prototype snapshot is missing class {0}")]
    MissingSnapshot(usize),
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("did not converge after {iters} iterations (residual {residual:e})")]
    NonConvergence { iters: usize, residual: f64 },
    #[error("{kind}: {detail}")]
    Format { kind: FormatErrorKind, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl SecaError {
    pub fn format(kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        SecaError::Format {
            kind,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SecaError>;
