//! Crate-wide error type.
//!
//! Contract violations (bad shapes, empty sequences, invalid spans handed to
//! internal math) panic; everything recoverable — bad input files, misaligned
//! annotations, numerical failures during training — flows through
//! [`VqagError`].

use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum VqagError {
    /// File could not be read or written.
    Io { path: PathBuf, source: std::io::Error },
    /// Input file exists but does not parse.
    Parse { path: PathBuf, message: String },
    /// An answer annotation could not be aligned to token offsets.
    Alignment { record: String, message: String },
    /// A checkpoint failed validation (bad magic, version, or shape table).
    Checkpoint(String),
    /// Training or estimation produced a non-finite or impossible value.
    Numerical(String),
    /// Input data violates a documented precondition.
    InvalidInput(String),
}

impl fmt::Display for VqagError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VqagError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            VqagError::Parse { path, message } => {
                write!(f, "failed to parse {}: {message}", path.display())
            }
            VqagError::Alignment { record, message } => {
                write!(f, "answer alignment failed for {record}: {message}")
            }
            VqagError::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            VqagError::Numerical(msg) => write!(f, "numerical failure: {msg}"),
            VqagError::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
        }
    }
}

impl std::error::Error for VqagError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            VqagError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, VqagError>;
