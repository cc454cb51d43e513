//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes do not conform (matrix products, capture/layer mismatches, ...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A numeric value is out of contract (NaN/Inf, failed convergence, ...).
    #[error("value error: {0}")]
    Value(String),

    /// Matrix is singular to working precision; `pivot` is the column whose
    /// pivot collapsed during elimination.
    #[error("singular matrix: no usable pivot in column {pivot}")]
    Singular { pivot: usize },

    /// An operation was called before its prerequisites (e.g. preconditioning
    /// without cached decompositions).
    #[error("state error: {0}")]
    State(String),

    /// A collective was misused: shape disagreement across ranks, missing or
    /// duplicate contributions, rendezvous timeout.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Config file parse failure, tied to the offending line.
    #[error("config error at line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    /// Config-level invariant violation not tied to a file line.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset ingestion failure (bad magic, truncation, count mismatch).
    #[error("data error: {0}")]
    Data(String),

    /// Worker replicas diverged; this is a bug trap, not a user error.
    #[error("replica consistency error: {0}")]
    Consistency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 internal consistency.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigLine { .. } | Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Consistency(_) | Error::Protocol(_) => 4,
            _ => 1,
        }
    }
}
