//! Shared substrate for penalty-based decentralized bilevel optimization:
//! communication graphs with doubly stochastic mixing matrices, bilevel
//! problem families (quadratic and hyperparameter-optimization), and the
//! per-node stacked state the solvers operate on.

pub mod graph;
pub mod problem;
pub mod stacked;

use thiserror::Error;

/// Errors raised while building graphs, mixing matrices, or problems.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("graph is not connected")]
    Disconnected,
    #[error("symmetric eigensolver failed to converge")]
    Eigensolver,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
