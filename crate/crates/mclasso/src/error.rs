//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("row {row} sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },

    #[error("entry ({i},{j}) = {value} violates positivity")]
    Positivity { i: usize, j: usize, value: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("row {row} has no observed transitions")]
    ZeroRow { row: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("failed to converge: {0}")]
    Convergence(String),

    #[error("infeasible constraints: {0}")]
    Infeasible(String),

    #[error("degenerate test: {0}")]
    Degenerate(String),

    #[error("sequence too short: length {n}, need at least {min}")]
    TooShort { n: usize, min: usize },

    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error protocol.
    pub fn code(&self) -> &'static str {
        match self {
            Error::RowSum { .. } => "E_ROW_SUM",
            Error::Positivity { .. } => "E_POSITIVITY",
            Error::Shape(_) => "E_SHAPE",
            Error::ZeroRow { .. } => "E_ZERO_ROW",
            Error::Domain(_) => "E_DOMAIN",
            Error::Convergence(_) => "E_CONVERGENCE",
            Error::Infeasible(_) => "E_INFEASIBLE",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::TooShort { .. } => "E_TOO_SHORT",
            Error::Mismatch(_) => "E_MISMATCH",
            Error::Parse(_) => "E_PARSE",
            Error::Io(_) => "E_IO",
        }
    }

    /// CLI exit code class: 1 usage/validation, 2 numerical, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Parse(_) => 3,
            Error::Convergence(_)
            | Error::Domain(_)
            | Error::Degenerate(_)
            | Error::Infeasible(_)
            | Error::ZeroRow { .. } => 2,
            _ => 1,
        }
    }
}
