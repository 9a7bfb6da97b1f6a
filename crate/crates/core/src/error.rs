//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Scheme parameters cannot be satisfied (alpha > N, unavoidable complete
    /// collisions, or a coherent bucket that cannot be filled under its
    /// constraints).
    #[error("infeasible hash scheme: {0}")]
    InfeasibleScheme(String),

    /// A caller-supplied value is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Bad magic, unsupported version, truncation, or checksum mismatch in a
    /// binary artifact.
    #[error("format error: {0}")]
    Format(String),

    /// Text-input parse failure; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A loss, activation, or gradient became NaN/inf.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;
