//! Decentralized penalty-based bilevel optimization over simulated
//! peer-to-peer networks.
//!
//! The consensus bilevel problem is replaced by a penalized surrogate whose
//! inner Hessian splits into a block-diagonal SPD part D and a neighbor-sparse
//! PSD part B. The solver alternates decentralized gradient rounds on the
//! inner variable with a truncated-series estimate of the inverse-Hessian-
//! gradient product, then takes an outer step; every exchange touches only
//! graph neighbors. Modules:
//!
//! - [`penalty`]: blockwise products with the lifted penalty matrices and the
//!   D/B splitting, plus the series contraction factor and eigenvalue bounds.
//! - [`dihgp`]: the neighbor-only truncated-series recursion for
//!   h = -H^{-1} grad_y f, with traces and error diagnostics.
//! - [`solver`]: the outer/inner alternating loop with warm starts, step-size
//!   schedules, and communication counters.
//! - [`theory`]: closed-form constants (contraction factors, step caps,
//!   Lipschitz moduli, communication-complexity rows).
//! - [`diagnostics`]: stationarity measures, penalty-gap probes, and metric
//!   records for runs.
//! - [`experiment`]: config-driven experiment runner behind the CLI.

pub mod diagnostics;
pub mod dihgp;
pub mod experiment;
pub mod penalty;
pub mod solver;
pub mod theory;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum DagmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("local inner Hessian block at node {node} is not positive definite")]
    NonSpdBlock { node: usize },
    #[error("series contraction factor rho = {rho} is not below 1; shrink the self-weight spread or increase beta * mu_g")]
    ContractionFailed { rho: f64 },
    #[error("run diverged at outer iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },
    #[error("iterative solve did not converge: {0}")]
    NonConvergence(String),
    #[error("reference optimum unavailable: {0}")]
    ReferenceUnavailable(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dagm_core::CoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DagmError>;
