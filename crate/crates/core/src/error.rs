//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by model construction, metric selection, and solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),

    /// Equality constraint matrix is rank deficient. Row indices are 0-based.
    #[error("rank deficient equality constraints; dependent rows {rows:?}")]
    RankDeficient { rows: Vec<usize> },

    #[error("matrix not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("unsupported combination: {0}")]
    Unsupported(String),

    #[error("infeasible metric choice at node {node}: {detail}")]
    InfeasibleMetric { node: usize, detail: String },

    /// A simulated node attempted to message a non-neighbor.
    #[error("protocol violation: message from node {from} to non-neighbor {to}")]
    ProtocolViolation { from: usize, to: usize },

    #[error("{what} did not converge within {max_iter} iterations")]
    NonConvergence { what: String, max_iter: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid problem: {0}")]
    Invalid(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
