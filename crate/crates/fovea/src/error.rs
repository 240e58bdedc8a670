//! Error type shared across the crate.
//!
//! Variants map onto process exit codes in the CLI: usage/config errors
//! exit 1, data/parse errors exit 2, numeric failures exit 3.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    Dimension(String),
    /// Invalid argument to an operation (bad k, empty caption, ...).
    Argument(String),
    /// Malformed configuration (file or flag), with the offending field.
    Config(String),
    /// Command-line usage error.
    Usage(String),
    /// Malformed data file; carries path and 1-based line number.
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    /// Data-level problem that is not a syntax error (missing file, bad dims).
    Data(String),
    /// Numeric failure: non-finite loss, failed gradient check, ...
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) => write!(f, "dimension error: {m}"),
            Error::Argument(m) => write!(f, "argument error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Parse { path, line, msg } => write!(f, "parse error: {path}:{line}: {msg}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) | Error::Argument(_) => 1,
            Error::Parse { .. } | Error::Data(_) | Error::Io(_) | Error::Dimension(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
