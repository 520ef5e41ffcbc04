//! Per-node stacked iterates.
//!
//! The solvers never materialize the Kronecker-lifted matrices; everything is
//! expressed over per-node blocks x_i in R^{d1} and y_i in R^{d2}. This module
//! holds that block layout plus the flatten/unflatten helpers used when a
//! dense reference computation needs one long vector.

use nalgebra::DVector;

use crate::{CoreError, Result};

/// Stacked decision state: one outer block and one inner block per node.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
}

impl StackedState {
    pub fn zeros(n: usize, d1: usize, d2: usize) -> StackedState {
        StackedState {
            x: (0..n).map(|_| DVector::zeros(d1)).collect(),
            y: (0..n).map(|_| DVector::zeros(d2)).collect(),
        }
    }

    pub fn new(x: Vec<DVector<f64>>, y: Vec<DVector<f64>>) -> Result<StackedState> {
        if x.len() != y.len() {
            return Err(CoreError::DimensionMismatch(format!(
                "{} outer blocks vs {} inner blocks",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(CoreError::InvalidParameter("need at least one node".into()));
        }
        let (d1, d2) = (x[0].len(), y[0].len());
        if x.iter().any(|b| b.len() != d1) || y.iter().any(|b| b.len() != d2) {
            return Err(CoreError::DimensionMismatch("ragged block dimensions".into()));
        }
        Ok(StackedState { x, y })
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn d1(&self) -> usize {
        self.x[0].len()
    }

    pub fn d2(&self) -> usize {
        self.y[0].len()
    }

    /// Block average of the outer iterates.
    pub fn x_bar(&self) -> DVector<f64> {
        block_average(&self.x)
    }

    /// Block average of the inner iterates.
    pub fn y_bar(&self) -> DVector<f64> {
        block_average(&self.y)
    }

    /// sqrt(sum_i ||x_i - x_bar||^2): Euclidean distance of the stacked outer
    /// iterate from its consensus projection.
    pub fn consensus_error_x(&self) -> f64 {
        consensus_error(&self.x)
    }

    pub fn consensus_error_y(&self) -> f64 {
        consensus_error(&self.y)
    }

    pub fn flatten_x(&self) -> DVector<f64> {
        flatten(&self.x)
    }

    pub fn flatten_y(&self) -> DVector<f64> {
        flatten(&self.y)
    }
}

/// Mean of equally sized blocks.
pub fn block_average(blocks: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(blocks[0].len());
    for b in blocks {
        acc += b;
    }
    acc / blocks.len() as f64
}

/// Distance from the consensus subspace, sqrt(sum_i ||b_i - mean||^2).
pub fn consensus_error(blocks: &[DVector<f64>]) -> f64 {
    let mean = block_average(blocks);
    blocks
        .iter()
        .map(|b| (b - &mean).norm_squared())
        .sum::<f64>()
        .sqrt()
}

/// Concatenates blocks into one long vector, node-major.
pub fn flatten(blocks: &[DVector<f64>]) -> DVector<f64> {
    let d = blocks[0].len();
    let mut out = DVector::zeros(blocks.len() * d);
    for (i, b) in blocks.iter().enumerate() {
        out.rows_mut(i * d, d).copy_from(b);
    }
    out
}

/// Splits a node-major long vector back into n blocks of dimension d.
pub fn unflatten(v: &DVector<f64>, n: usize, d: usize) -> Result<Vec<DVector<f64>>> {
    if v.len() != n * d {
        return Err(CoreError::DimensionMismatch(format!(
            "vector of length {} cannot split into {n} blocks of {d}",
            v.len()
        )));
    }
    Ok((0..n).map(|i| v.rows(i * d, d).into_owned()).collect())
}

/// Euclidean norm of a block collection viewed as one stacked vector.
pub fn stacked_norm(blocks: &[DVector<f64>]) -> f64 {
    blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt()
}
