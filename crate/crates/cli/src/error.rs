use std::fmt;
use std::path::Path;

use seca_core::SecaError;

/// Process exit codes. Stable: scripts depend on them.
pub mod code {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const IO: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const MALFORMED_DATA: i32 = 5;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(code::CONFIG, message)
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(code::MALFORMED_DATA, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(code::IO, format!("{}: {err}", path.display()))
    }

    /// Prefixes the message, keeping the code.
    pub fn context(self, what: impl fmt::Display) -> Self {
        CliError {
            code: self.code,
            message: format!("{what}: {}", self.message),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Config problems exit 2, I/O 3, divergence 4, bad data files 5.
pub fn exit_code(err: &SecaError) -> i32 {
    match err {
        SecaError::InvalidConfig(_) => code::CONFIG,
        SecaError::Io(_) => code::IO,
        SecaError::NonFinite(_) => code::NUMERIC,
        SecaError::Format { .. } => code::MALFORMED_DATA,
        _ => code::OTHER,
    }
}

impl From<SecaError> for CliError {
    fn from(err: SecaError) -> Self {
        CliError::new(exit_code(&err), err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
