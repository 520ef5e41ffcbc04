//! Solution-quality diagnostics: stationarity gaps against a reference
//! optimum, the running averages used in the convex and nonconvex modes, and
//! the penalty gap between the penalized and consensus-constrained inner
//! solutions.
//!
//! These routines are reporting paths, not part of the decentralized
//! algorithm: they may run centralized Newton iterations and assemble small
//! dense systems to produce reference quantities. Nothing here feeds back
//! into the solver.

use crate::dihgp::{dense_h, DENSE_DIAG_LIMIT};
use crate::penalty::{i_minus_w_quadform, inner_penalized_grad};
use crate::solver::Trajectory;
use crate::{DagmError, Result};
use dagm_core::graph::MixingMatrix;
use dagm_core::problem::BilevelProblem;
use dagm_core::stacked::StackedState;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Which stationarity measure a run reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationarityMode {
    /// Objective gap at the node average: value(x_bar_k) - value(x_ref).
    StronglyConvex,
    /// Objective gap at the running average of the node averages.
    Convex,
    /// Running mean of the squared reduced-gradient norm at the node average.
    Nonconvex,
}

/// One metrics row per outer iterate. Exactly one of the three gap fields is
/// populated, matching the requested mode; counters are cumulative.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub k: usize,
    pub sc_gap: Option<f64>,
    pub cvx_gap: Option<f64>,
    pub ncvx_grad_sq: Option<f64>,
    pub consensus_err: f64,
    pub msgs_d1: u64,
    pub msgs_d2: u64,
}

/// Reference outer solution used by the gap-type stationarity measures.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub x: DVector<f64>,
    pub value: f64,
}

const NEWTON_MAX_ITERS: usize = 200;
const NEWTON_MAX_BACKTRACKS: usize = 60;

/// Damped Newton on a smooth convex objective given by closures. Solves
/// hess * step = grad with Cholesky (LU fallback) and Armijo backtracking.
fn damped_newton<FV, FG, FH>(
    mut y: DVector<f64>,
    value: FV,
    grad: FG,
    hess: FH,
    tol: f64,
    what: &str,
) -> Result<DVector<f64>>
where
    FV: Fn(&DVector<f64>) -> f64,
    FG: Fn(&DVector<f64>) -> DVector<f64>,
    FH: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITERS {
        let g = grad(&y);
        residual = g.norm();
        if residual <= tol {
            return Ok(y);
        }
        let h = hess(&y);
        let step = match h.clone().cholesky() {
            Some(ch) => ch.solve(&g),
            None => h
                .lu()
                .solve(&g)
                .ok_or_else(|| DagmError::NonConvergence(format!("{what}: singular Hessian")))?,
        };
        let base = value(&y);
        let slope = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..NEWTON_MAX_BACKTRACKS {
            let trial = &y - t * &step;
            if &trial == &y {
                // the step has underflowed against y; nothing left to try
                break;
            }
            // when the predicted decrease falls below one ulp of the
            // objective the Armijo comparison is pure rounding noise, so
            // accept on gradient-norm descent instead
            let below_value_resolution =
                1e-4 * t * slope <= f64::EPSILON * (1.0 + base.abs());
            let sufficient = if below_value_resolution {
                grad(&trial).norm() < residual
            } else {
                value(&trial) <= base - 1e-4 * t * slope
            };
            if sufficient {
                y = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // no descent direction left at machine precision; accept the
            // point if it already satisfies a loose version of the tolerance
            if residual <= tol.max(1e-9) * (1.0 + y.norm()) {
                return Ok(y);
            }
            return Err(DagmError::NonConvergence(format!(
                "{what}: line search stalled at residual {residual:.3e}"
            )));
        }
    }
    Err(DagmError::NonConvergence(format!(
        "{what}: Newton did not reach tolerance {tol:.3e} in {NEWTON_MAX_ITERS} iterations \
         (residual {residual:.3e})"
    )))
}

/// Minimizer of the consensus-constrained inner problem sum_i g_i(x_i, y)
/// over a single shared y. `x` holds one block per node.
pub fn consensus_inner_solve(
    p: &BilevelProblem,
    x: &[DVector<f64>],
    tol: f64,
    y0: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    if x.len() != p.n() {
        return Err(DagmError::InvalidParameter(format!(
            "need one x block per node: got {} for n = {}",
            x.len(),
            p.n()
        )));
    }
    let d2 = p.d2();
    let start = y0.cloned().unwrap_or_else(|| DVector::zeros(d2));
    let value = |y: &DVector<f64>| (0..p.n()).map(|i| p.local(i).g_val(&x[i], y)).sum::<f64>();
    let grad = |y: &DVector<f64>| {
        (0..p.n()).fold(DVector::zeros(d2), |acc, i| acc + p.local(i).grad_g_y(&x[i], y))
    };
    let hess = |y: &DVector<f64>| {
        (0..p.n()).fold(DMatrix::zeros(d2, d2), |acc, i| acc + p.local(i).hess_g_yy(&x[i], y))
    };
    damped_newton(start, value, grad, hess, tol, "consensus inner solve")
}

/// Minimizer of the penalized inner objective
/// (1/2) y^T ((I - W) kron I) y + beta * sum_i g_i(x_i, y_i)
/// by centralized damped Newton on the stacked variable. Reporting path only;
/// the decentralized loop never calls this.
pub fn penalized_inner_newton(
    p: &BilevelProblem,
    w: &MixingMatrix,
    beta: f64,
    x: &[DVector<f64>],
    tol: f64,
    y0: Option<&[DVector<f64>]>,
) -> Result<Vec<DVector<f64>>> {
    let (n, d2) = (p.n(), p.d2());
    if x.len() != n {
        return Err(DagmError::InvalidParameter(format!(
            "need one x block per node: got {} for n = {n}",
            x.len()
        )));
    }
    if n * d2 > DENSE_DIAG_LIMIT {
        return Err(DagmError::InvalidParameter(format!(
            "dense penalized solve limited to n * d2 <= {DENSE_DIAG_LIMIT}, got {}",
            n * d2
        )));
    }
    if beta <= 0.0 || !beta.is_finite() {
        return Err(DagmError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let start = match y0 {
        Some(blocks) => dagm_core::stacked::flatten(blocks),
        None => DVector::zeros(n * d2),
    };
    let to_blocks = |y: &DVector<f64>| dagm_core::stacked::unflatten(y, n, d2).expect("sized here");
    let value = |y: &DVector<f64>| {
        let blocks = to_blocks(y);
        0.5 * i_minus_w_quadform(w, &blocks)
            + beta
                * (0..n).map(|i| p.local(i).g_val(&x[i], &blocks[i])).sum::<f64>()
    };
    let grad = |y: &DVector<f64>| {
        let blocks = to_blocks(y);
        let s = StackedState::new(x.to_vec(), blocks).expect("sized here");
        let q = inner_penalized_grad(p, w, beta, &s).expect("beta checked above");
        beta * dagm_core::stacked::flatten(&q)
    };
    let hess = |y: &DVector<f64>| {
        let blocks = to_blocks(y);
        let s = StackedState::new(x.to_vec(), blocks).expect("sized here");
        dense_h(p, w, beta, &s)
    };
    let sol = damped_newton(start, value, grad, hess, tol, "penalized inner solve")?;
    Ok(to_blocks(&sol))
}

/// Gradient of the reduced single-variable objective
/// Phi(x) = (1/n) sum_i f_i(x, y*(x)), y*(x) = argmin_y sum_i g_i(x, y),
/// evaluated by implicit differentiation at the supplied consensus point.
pub fn reduced_grad_consensus(
    p: &BilevelProblem,
    x_bar: &DVector<f64>,
    y_star: &DVector<f64>,
) -> Result<DVector<f64>> {
    let (n, d1, d2) = (p.n(), p.d1(), p.d2());
    let mut grad_x = DVector::zeros(d1);
    let mut grad_y = DVector::zeros(d2);
    let mut jac = DMatrix::zeros(d1, d2);
    let mut hess = DMatrix::zeros(d2, d2);
    for i in 0..n {
        let local = p.local(i);
        grad_x += local.grad_f_x(x_bar, y_star);
        grad_y += local.grad_f_y(x_bar, y_star);
        jac += local.jac_g_xy(x_bar, y_star);
        hess += local.hess_g_yy(x_bar, y_star);
    }
    let solved = match hess.clone().cholesky() {
        Some(ch) => ch.solve(&grad_y),
        None => hess
            .lu()
            .solve(&grad_y)
            .ok_or_else(|| DagmError::NonConvergence("singular inner Hessian sum".into()))?,
    };
    Ok((grad_x - jac * solved) / n as f64)
}

/// Reduced objective value (1/n) sum_i f_i(x_bar, y*(x_bar)) at a consensus
/// point, together with the inner solution used.
pub fn reduced_value_consensus(
    p: &BilevelProblem,
    x_bar: &DVector<f64>,
    tol: f64,
    warm: Option<&DVector<f64>>,
) -> Result<(f64, DVector<f64>)> {
    let x_blocks = vec![x_bar.clone(); p.n()];
    let y_star = consensus_inner_solve(p, &x_blocks, tol, warm)?;
    let value =
        (0..p.n()).map(|i| p.local(i).f_val(x_bar, &y_star)).sum::<f64>() / p.n() as f64;
    Ok((value, y_star))
}

const REFERENCE_GRAD_TOL: f64 = 1e-9;
const REFERENCE_INNER_TOL: f64 = 1e-12;

/// Reference minimizer of the reduced objective. Quadratic instances use the
/// closed form; anything else runs gradient descent with backtracking from
/// the origin and fails loudly if the gradient tolerance is not reached.
pub fn reference_optimum(p: &BilevelProblem, max_iters: usize) -> Result<ReferenceSolution> {
    if let Some(q) = p.quad_closed_form() {
        return Ok(ReferenceSolution { x: q.x_star(), value: q.f_star() });
    }
    let mut x = DVector::zeros(p.d1());
    let (mut value, mut y_warm) = reduced_value_consensus(p, &x, REFERENCE_INNER_TOL, None)?;
    let mut step = 1.0;
    for _ in 0..max_iters {
        let g = reduced_grad_consensus(p, &x, &y_warm)?;
        let gnorm = g.norm();
        if gnorm <= REFERENCE_GRAD_TOL {
            return Ok(ReferenceSolution { x, value });
        }
        let mut improved = false;
        while step >= 1e-16 {
            let trial = &x - step * &g;
            let (tv, ty) =
                reduced_value_consensus(p, &trial, REFERENCE_INNER_TOL, Some(&y_warm))?;
            if tv <= value - 1e-4 * step * gnorm * gnorm {
                x = trial;
                value = tv;
                y_warm = ty;
                step = (step * 2.0).min(1e3);
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            return Err(DagmError::ReferenceUnavailable(format!(
                "reduced-objective descent stalled at gradient norm {gnorm:.3e}"
            )));
        }
    }
    Err(DagmError::ReferenceUnavailable(format!(
        "reduced-objective descent did not reach gradient norm {REFERENCE_GRAD_TOL:.1e} \
         in {max_iters} iterations"
    )))
}

const STATIONARITY_INNER_TOL: f64 = 1e-11;
const REFERENCE_MAX_ITERS: usize = 200_000;

/// Per-iterate stationarity series for a finished trajectory.
///
/// Strongly convex mode reports value(x_bar_k) - value(reference); convex
/// mode reports the same gap at the running average (1/k) sum_{j<=k} x_bar_j
/// over iterates 1..k (the initial snapshot is reported at its own point);
/// nonconvex mode reports the running mean of the squared reduced-gradient
/// norm over iterates 0..k-1, so the final row aggregates every point the
/// outer loop stepped from.
pub fn stationarity(
    p: &BilevelProblem,
    traj: &Trajectory,
    mode: StationarityMode,
) -> Result<Vec<MetricsRecord>> {
    let reference = match mode {
        StationarityMode::Nonconvex => None,
        _ => Some(reference_optimum(p, REFERENCE_MAX_ITERS)?),
    };
    let mut records = Vec::with_capacity(traj.snapshots.len());
    let mut y_warm: Option<DVector<f64>> = None;
    let mut running_x: Option<DVector<f64>> = None;
    let mut running_grad_sq = 0.0;
    let mut grad_points = 0usize;

    for snap in &traj.snapshots {
        let x_bar = snap.state.x_bar();
        let mut record = MetricsRecord {
            k: snap.k,
            sc_gap: None,
            cvx_gap: None,
            ncvx_grad_sq: None,
            consensus_err: snap.consensus_err_x,
            msgs_d1: snap.msgs_d1,
            msgs_d2: snap.msgs_d2,
        };
        match mode {
            StationarityMode::StronglyConvex => {
                let (value, y) = reduced_value_consensus(
                    p,
                    &x_bar,
                    STATIONARITY_INNER_TOL,
                    y_warm.as_ref(),
                )?;
                y_warm = Some(y);
                record.sc_gap = Some(value - reference.as_ref().expect("set above").value);
            }
            StationarityMode::Convex => {
                let eval_at = if snap.k == 0 {
                    x_bar.clone()
                } else {
                    let sum = match running_x.take() {
                        Some(s) => s + &x_bar,
                        None => x_bar.clone(),
                    };
                    running_x = Some(sum.clone());
                    sum / snap.k as f64
                };
                let (value, y) = reduced_value_consensus(
                    p,
                    &eval_at,
                    STATIONARITY_INNER_TOL,
                    y_warm.as_ref(),
                )?;
                y_warm = Some(y);
                record.cvx_gap = Some(value - reference.as_ref().expect("set above").value);
            }
            StationarityMode::Nonconvex => {
                // the mean over iterates 0..k-1 is attributed to row k, so it
                // only aggregates points the loop has already stepped away from
                if snap.k > 0 {
                    record.ncvx_grad_sq = Some(running_grad_sq / grad_points as f64);
                }
                let x_blocks = vec![x_bar.clone(); p.n()];
                let y_star = consensus_inner_solve(
                    p,
                    &x_blocks,
                    STATIONARITY_INNER_TOL,
                    y_warm.as_ref(),
                )?;
                let g = reduced_grad_consensus(p, &x_bar, &y_star)?;
                y_warm = Some(y_star);
                running_grad_sq += g.norm_squared();
                grad_points += 1;
            }
        }
        records.push(record);
    }
    Ok(records)
}

const PENALTY_GAP_TOL: f64 = 1e-12;

/// Distance || 1 kron y*(x) - y_check*(x) || between the lifted
/// consensus-constrained inner solution and the penalized inner solution at
/// the given stacked x.
pub fn penalty_gap(
    p: &BilevelProblem,
    w: &MixingMatrix,
    beta: f64,
    x: &[DVector<f64>],
) -> Result<f64> {
    let y_cons = consensus_inner_solve(p, x, PENALTY_GAP_TOL, None)?;
    let lifted: Vec<DVector<f64>> = vec![y_cons.clone(); p.n()];
    let y_pen = penalized_inner_newton(p, w, beta, x, PENALTY_GAP_TOL, Some(&lifted))?;
    let mut sq = 0.0;
    for block in &y_pen {
        sq += (block - &y_cons).norm_squared();
    }
    Ok(sq.sqrt())
}

/// Least-squares slope of ln(gap) against ln(beta). Points with nonpositive
/// entries are rejected: the fit lives on the log-log plane.
pub fn penalty_gap_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(DagmError::InvalidParameter(
            "slope fit needs at least two (beta, gap) points".into(),
        ));
    }
    let mut xs = Vec::with_capacity(points.len());
    let mut ys = Vec::with_capacity(points.len());
    for &(beta, gap) in points {
        if beta <= 0.0 || gap <= 0.0 || !beta.is_finite() || !gap.is_finite() {
            return Err(DagmError::InvalidParameter(format!(
                "slope fit needs positive finite points, got ({beta}, {gap})"
            )));
        }
        xs.push(beta.ln());
        ys.push(gap.ln());
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(DagmError::InvalidParameter("slope fit needs distinct beta values".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}
