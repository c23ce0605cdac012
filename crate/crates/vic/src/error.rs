//! Error type shared across the crate, with the process exit-code mapping
//! used by the `vic` binary.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, VicError>;

#[derive(Debug, Error)]
pub enum VicError {
    /// Tensor or vector dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad arguments, unusable flags, or a missing config file.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed input row.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Non-finite values, divergence, or degenerate numerics.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A required artifact from an earlier pipeline stage is missing.
    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl VicError {
    /// Exit code contract: 0 success, 2 usage, 3 data/validation,
    /// 4 numeric/divergence, 5 dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            VicError::Usage(_) => 2,
            VicError::Shape(_) | VicError::Data(_) | VicError::Parse { .. } | VicError::Io(_) => 3,
            VicError::Numeric(_) => 4,
            VicError::Dependency(_) => 5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_match_contract() {
        assert_eq!(VicError::Usage("x".into()).exit_code(), 2);
        assert_eq!(VicError::Data("x".into()).exit_code(), 3);
        assert_eq!(
            VicError::Parse {
                line: 3,
                msg: "x".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(VicError::Numeric("x".into()).exit_code(), 4);
        assert_eq!(VicError::Dependency("x".into()).exit_code(), 5);
    }
}
