//! Error type shared by all modules.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LawnError {
    /// Invalid configuration (bad dims, parameter ranges, unknown keys).
    #[error("configuration error: {0}")]
    Config(String),

    /// Shape mismatch between tensors or between a network and its input.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values or other numeric breakdown during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Request exceeds a hard capability cap (e.g. dense Hessian size).
    #[error("capability error: {0}")]
    Capability(String),

    /// API misuse (stale cache, double reset, out-of-range step index).
    #[error("usage error: {0}")]
    Usage(String),

    /// Text parsing failure with a 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, LawnError>;
