//! Dense reference solvers for cross-checking the decentralized algorithm.
//!
//! Everything here is assembled explicitly: the Kronecker-lifted penalty
//! matrices, the inner Hessian H = (I - W) (x) I + beta * blockdiag(hess g),
//! its diagonal/off-diagonal splitting, truncated series inverses, numeric
//! outer gradients, and a centralized bilevel baseline. These paths share no
//! code with the solver crate (this crate depends on the type layer only),
//! which is the point: agreement between the two routes is evidence, not
//! tautology.
//!
//! All dense entry points are capped at n <= 16 nodes and block dimensions
//! <= 8 and reject anything larger loudly.

use dagm_core::graph::MixingMatrix;
use dagm_core::problem::BilevelProblem;
use dagm_core::stacked::{flatten, unflatten};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

pub const MAX_NODES: usize = 16;
pub const MAX_BLOCK_DIM: usize = 8;

#[derive(Error, Debug)]
pub enum OracleError {
    #[error("oracle size cap exceeded: {0} (caps: n <= {MAX_NODES}, d1,d2 <= {MAX_BLOCK_DIM})")]
    TooLarge(String),
    #[error("dimension mismatch: {0}")]
    Dimensions(String),
    #[error("dense factorization failed: {0}")]
    Factorization(String),
    #[error("Newton solve did not reach tolerance {tol:e} in {iters} iterations (residual {residual:e})")]
    NewtonStalled { tol: f64, iters: usize, residual: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Core(#[from] dagm_core::CoreError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

fn check_caps(p: &BilevelProblem, w: &MixingMatrix) -> Result<()> {
    if p.n() != w.n() {
        return Err(OracleError::Dimensions(format!(
            "problem has {} nodes but the mixing matrix has {}",
            p.n(),
            w.n()
        )));
    }
    if p.n() > MAX_NODES || p.d1() > MAX_BLOCK_DIM || p.d2() > MAX_BLOCK_DIM {
        return Err(OracleError::TooLarge(format!(
            "n = {}, d1 = {}, d2 = {}",
            p.n(),
            p.d1(),
            p.d2()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense assembly
// ---------------------------------------------------------------------------

/// Explicit dense penalty system at a given state.
#[derive(Debug, Clone)]
pub struct DenseSystem {
    pub n: usize,
    pub d2: usize,
    /// H = (I - W) (x) I_d2 + beta * blockdiag(hess_g_yy); off-diagonal block
    /// (i, j) is -w_ij I.
    pub h: DMatrix<f64>,
    /// D = beta * blockdiag(hess_g_yy) + 2 (I - diag(W)) (x) I_d2.
    pub d: DMatrix<f64>,
    /// B = (I - 2 diag(W) + W) (x) I_d2, so D - B = H.
    pub b: DMatrix<f64>,
}

/// Kronecker product (I - W) (x) I_d as an explicit dense matrix.
pub fn i_minus_w_kron(w: &MixingMatrix, d: usize) -> DMatrix<f64> {
    let n = w.n();
    let mut m = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..n {
            let entry = if i == j { 1.0 - w.weight(i, i) } else { -w.weight(i, j) };
            if entry != 0.0 {
                for k in 0..d {
                    m[(i * d + k, j * d + k)] = entry;
                }
            }
        }
    }
    m
}

/// Assembles H, D, and B at the state `(x, y)` given as per-node blocks.
pub fn dense_assemble(
    p: &BilevelProblem,
    w: &MixingMatrix,
    beta: f64,
    x: &[DVector<f64>],
    y: &[DVector<f64>],
) -> Result<DenseSystem> {
    check_caps(p, w)?;
    if beta <= 0.0 || !beta.is_finite() {
        return Err(OracleError::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    if x.len() != p.n() || y.len() != p.n() {
        return Err(OracleError::Dimensions("state block count != n".into()));
    }
    let (n, d2) = (p.n(), p.d2());
    let mut h = i_minus_w_kron(w, d2);
    let mut d = DMatrix::zeros(n * d2, n * d2);
    let mut b = DMatrix::zeros(n * d2, n * d2);
    for i in 0..n {
        let hess = p.local(i).hess_g_yy(&x[i], &y[i]);
        if hess.nrows() != d2 || hess.ncols() != d2 {
            return Err(OracleError::Dimensions(format!("hess_g_yy at node {i} is not d2 x d2")));
        }
        let wii = w.weight(i, i);
        for r in 0..d2 {
            for c in 0..d2 {
                h[(i * d2 + r, i * d2 + c)] += beta * hess[(r, c)];
                d[(i * d2 + r, i * d2 + c)] = beta * hess[(r, c)];
            }
            d[(i * d2 + r, i * d2 + r)] += 2.0 * (1.0 - wii);
            b[(i * d2 + r, i * d2 + r)] = 1.0 - wii;
        }
        for &j in w.neighbors(i) {
            let wij = w.weight(i, j);
            for r in 0..d2 {
                b[(i * d2 + r, j * d2 + r)] = wij;
            }
        }
    }
    Ok(DenseSystem { n, d2, h, d, b })
}

// ---------------------------------------------------------------------------
// Dense inverse-Hessian products
// ---------------------------------------------------------------------------

/// Exact product h = -H^{-1} p via dense factorization.
pub fn dense_ihgp(sys: &DenseSystem, p_vec: &DVector<f64>) -> Result<DVector<f64>> {
    if p_vec.len() != sys.n * sys.d2 {
        return Err(OracleError::Dimensions("p has wrong length".into()));
    }
    if let Some(chol) = sys.h.clone().cholesky() {
        return Ok(-chol.solve(p_vec));
    }
    // H can be only positive semidefinite when mu_g = 0; fall back to LU.
    sys.h
        .clone()
        .lu()
        .solve(&(-p_vec))
        .ok_or_else(|| OracleError::Factorization("H is singular".into()))
}

/// Symmetric inverse square root via eigendecomposition.
fn inv_sqrt_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| OracleError::Factorization("eigensolver stalled".into()))?;
    if eig.eigenvalues.min() <= 0.0 {
        return Err(OracleError::Factorization(format!(
            "matrix is not positive definite (min eigenvalue {})",
            eig.eigenvalues.min()
        )));
    }
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.powf(-0.5)));
    Ok(scaled * eig.eigenvectors.transpose())
}

/// Truncated series inverse applied to -p:
/// h_(U) = -D^{-1/2} (sum_{u=0}^{U} X^u) D^{-1/2} p with X = D^{-1/2} B D^{-1/2},
/// evaluated by explicit dense matrix powers.
pub fn dense_truncated_neumann(
    sys: &DenseSystem,
    p_vec: &DVector<f64>,
    u_terms: usize,
) -> Result<DVector<f64>> {
    if p_vec.len() != sys.n * sys.d2 {
        return Err(OracleError::Dimensions("p has wrong length".into()));
    }
    let d_inv_sqrt = inv_sqrt_sym(&sys.d)?;
    let x = &d_inv_sqrt * &sys.b * &d_inv_sqrt;
    let dim = x.nrows();
    // Horner form: S_U = I + X (I + X (... (I + X) ...))
    let mut s = DMatrix::identity(dim, dim);
    for _ in 0..u_terms {
        s = DMatrix::identity(dim, dim) + &x * s;
    }
    Ok(-(&d_inv_sqrt * s * d_inv_sqrt * p_vec))
}

/// The truncated inverse itself, for eigenvalue certificates.
pub fn dense_truncated_inverse(sys: &DenseSystem, u_terms: usize) -> Result<DMatrix<f64>> {
    let d_inv_sqrt = inv_sqrt_sym(&sys.d)?;
    let x = &d_inv_sqrt * &sys.b * &d_inv_sqrt;
    let dim = x.nrows();
    let mut s = DMatrix::identity(dim, dim);
    for _ in 0..u_terms {
        s = DMatrix::identity(dim, dim) + &x * s;
    }
    Ok(&d_inv_sqrt * s * d_inv_sqrt)
}

/// Symmetric square root of an SPD matrix (for the truncation-error matrix).
pub fn sqrt_sym(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| OracleError::Factorization("eigensolver stalled".into()))?;
    if eig.eigenvalues.min() < 0.0 {
        return Err(OracleError::Factorization("matrix is not PSD".into()));
    }
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.sqrt()));
    Ok(scaled * eig.eigenvectors.transpose())
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000)
        .ok_or_else(|| OracleError::Factorization("eigensolver stalled".into()))?;
    let mut v: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(v)
}

// ---------------------------------------------------------------------------
// Penalized inner solve and numeric outer gradient
// ---------------------------------------------------------------------------

/// Solves the penalized inner problem
/// min_y (1/(2 beta)) y^T ((I - W) (x) I) y + sum_i g_i(x_i, y_i)
/// by damped Newton on the dense system; the Hessian of the objective is
/// exactly H / beta. Returns per-node blocks of the optimum.
pub fn dense_penalized_inner(
    p: &BilevelProblem,
    w: &MixingMatrix,
    beta: f64,
    x: &[DVector<f64>],
    tol: f64,
    y0: Option<&[DVector<f64>]>,
) -> Result<Vec<DVector<f64>>> {
    check_caps(p, w)?;
    let (n, d2) = (p.n(), p.d2());
    let iw = i_minus_w_kron(w, d2);
    let mut y: Vec<DVector<f64>> = match y0 {
        Some(blocks) => blocks.to_vec(),
        None => (0..n).map(|_| DVector::zeros(d2)).collect(),
    };

    let value = |y: &[DVector<f64>]| -> f64 {
        let yf = flatten(y);
        0.5 / beta * (yf.transpose() * &iw * &yf)[0] + p.sum_g(x, y)
    };
    let grad = |y: &[DVector<f64>]| -> DVector<f64> {
        let yf = flatten(y);
        let mut g = &iw * yf / beta;
        for i in 0..n {
            let gi = p.local(i).grad_g_y(&x[i], &y[i]);
            for k in 0..d2 {
                g[i * d2 + k] += gi[k];
            }
        }
        g
    };

    let max_iters = 200;
    for iter in 0..max_iters {
        let g = grad(&y);
        let residual = g.norm();
        if residual <= tol {
            return Ok(y);
        }
        let sys = dense_assemble(p, w, beta, x, &y)?;
        // Newton direction for the objective whose Hessian is H / beta
        let step = match sys.h.clone().cholesky() {
            Some(chol) => chol.solve(&g) * beta,
            None => sys
                .h
                .lu()
                .solve(&g)
                .map(|s| s * beta)
                .ok_or_else(|| OracleError::Factorization("inner Hessian is singular".into()))?,
        };
        // backtracking keeps nonquadratic losses honest
        let base = value(&y);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<DVector<f64>> = (0..n)
                .map(|i| &y[i] - t * step.rows(i * d2, d2).into_owned())
                .collect();
            if value(&trial) <= base - 1e-4 * t * step.dot(&g).max(0.0) {
                y = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(OracleError::NewtonStalled { tol, iters: iter, residual });
        }
    }
    let residual = grad(&y).norm();
    if residual <= tol {
        Ok(y)
    } else {
        Err(OracleError::NewtonStalled { tol, iters: max_iters, residual })
    }
}

/// Penalized outer value F(x) = (1/(2 alpha)) x^T ((I - W) (x) I_d1) x
/// + sum_i f_i(x_i, y_i(x)) with the inner blocks solved to `inner_tol`.
pub fn dense_penalized_outer_value(
    p: &BilevelProblem,
    w: &MixingMatrix,
    alpha: f64,
    beta: f64,
    x: &[DVector<f64>],
    inner_tol: f64,
    warm: Option<&[DVector<f64>]>,
) -> Result<f64> {
    let y = dense_penalized_inner(p, w, beta, x, inner_tol, warm)?;
    let xf = flatten(x);
    let iw1 = i_minus_w_kron(w, p.d1());
    Ok(0.5 / alpha * (xf.transpose() * iw1 * &xf)[0] + p.sum_f(x, &y))
}

/// Central-difference gradient of the penalized outer objective in the
/// stacked outer variable, with the inner problem re-solved to 1e-11 at every
/// probe. Returns per-node blocks.
pub fn fd_hypergradient(
    p: &BilevelProblem,
    w: &MixingMatrix,
    alpha: f64,
    beta: f64,
    x: &[DVector<f64>],
    eps: f64,
) -> Result<Vec<DVector<f64>>> {
    check_caps(p, w)?;
    if eps <= 0.0 {
        return Err(OracleError::InvalidParameter("eps must be positive".into()));
    }
    let inner_tol = 1e-11;
    let (n, d1) = (p.n(), p.d1());
    // warm start every probe from the unperturbed solution
    let base = dense_penalized_inner(p, w, beta, x, inner_tol, None)?;
    let mut grad = flatten(&vec![DVector::zeros(d1); n]);
    for i in 0..n {
        for k in 0..d1 {
            let mut hi = x.to_vec();
            hi[i][k] += eps;
            let mut lo = x.to_vec();
            lo[i][k] -= eps;
            let fhi = dense_penalized_outer_value(p, w, alpha, beta, &hi, inner_tol, Some(&base))?;
            let flo = dense_penalized_outer_value(p, w, alpha, beta, &lo, inner_tol, Some(&base))?;
            grad[i * d1 + k] = (fhi - flo) / (2.0 * eps);
        }
    }
    Ok(unflatten(&grad, n, d1)?)
}

// ---------------------------------------------------------------------------
// Centralized baselines
// ---------------------------------------------------------------------------

/// Newton solve of the centralized inner problem min_y sum_i g_i(x_i, y) for
/// a single shared y; pass n copies of a consensus point to evaluate y*(x_bar).
pub fn centralized_inner_solve(
    p: &BilevelProblem,
    x: &[DVector<f64>],
    tol: f64,
) -> Result<DVector<f64>> {
    if x.len() != p.n() {
        return Err(OracleError::Dimensions("x block count != n".into()));
    }
    let d2 = p.d2();
    let mut y = DVector::zeros(d2);
    let value = |y: &DVector<f64>| -> f64 {
        (0..p.n()).map(|i| p.local(i).g_val(&x[i], y)).sum()
    };
    let grad = |y: &DVector<f64>| -> DVector<f64> {
        (0..p.n()).fold(DVector::zeros(d2), |acc, i| acc + p.local(i).grad_g_y(&x[i], y))
    };
    for _ in 0..200 {
        let g = grad(&y);
        if g.norm() <= tol {
            return Ok(y);
        }
        let hess = (0..p.n())
            .fold(DMatrix::zeros(d2, d2), |acc, i| acc + p.local(i).hess_g_yy(&x[i], &y));
        let step = hess
            .clone()
            .cholesky()
            .map(|c| c.solve(&g))
            .or_else(|| hess.lu().solve(&g))
            .ok_or_else(|| OracleError::Factorization("centralized inner Hessian singular".into()))?;
        let base = value(&y);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &y - t * &step;
            if value(&trial) <= base - 1e-4 * t * step.dot(&g).max(0.0) {
                y = trial;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(OracleError::NewtonStalled { tol, iters: 200, residual: g.norm() });
        }
    }
    let residual = grad(&y).norm();
    if residual <= tol {
        Ok(y)
    } else {
        Err(OracleError::NewtonStalled { tol, iters: 200, residual })
    }
}

/// Gradient of the centralized reduced objective phi(x) = mean_i f_i(x, y*(x))
/// through the implicit function theorem.
pub fn centralized_reduced_grad(p: &BilevelProblem, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = p.n();
    let copies: Vec<DVector<f64>> = (0..n).map(|_| x.clone()).collect();
    let y = centralized_inner_solve(p, &copies, tol)?;
    let d2 = p.d2();
    let mut sum_hess = DMatrix::zeros(d2, d2);
    let mut sum_jac = DMatrix::zeros(p.d1(), d2);
    let mut sum_fx = DVector::zeros(p.d1());
    let mut sum_fy = DVector::zeros(d2);
    for i in 0..n {
        sum_hess += p.local(i).hess_g_yy(x, &y);
        sum_jac += p.local(i).jac_g_xy(x, &y);
        sum_fx += p.local(i).grad_f_x(x, &y);
        sum_fy += p.local(i).grad_f_y(x, &y);
    }
    let solve = sum_hess
        .clone()
        .cholesky()
        .map(|c| c.solve(&sum_fy))
        .or_else(|| sum_hess.lu().solve(&sum_fy))
        .ok_or_else(|| OracleError::Factorization("inner Hessian singular".into()))?;
    Ok((sum_fx - sum_jac * solve) / n as f64)
}

/// Centralized reduced value phi(x).
pub fn centralized_reduced_value(p: &BilevelProblem, x: &DVector<f64>, tol: f64) -> Result<f64> {
    let copies: Vec<DVector<f64>> = (0..p.n()).map(|_| x.clone()).collect();
    let y = centralized_inner_solve(p, &copies, tol)?;
    Ok((0..p.n()).map(|i| p.local(i).f_val(x, &y)).sum::<f64>() / p.n() as f64)
}

/// Gradient descent with backtracking on the reduced objective, from zero.
/// Returns the final iterate and its value; for nonconvex instances this is a
/// stationary point, not necessarily a global optimum.
pub fn centralized_bilevel_gd(
    p: &BilevelProblem,
    grad_tol: f64,
    max_iters: usize,
) -> Result<(DVector<f64>, f64)> {
    let inner_tol = 1e-12;
    let mut x = DVector::zeros(p.d1());
    let mut value = centralized_reduced_value(p, &x, inner_tol)?;
    let mut step = 1.0_f64;
    for _ in 0..max_iters {
        let g = centralized_reduced_grad(p, &x, inner_tol)?;
        if g.norm() <= grad_tol {
            return Ok((x, value));
        }
        // backtracking from a slowly growing trial step
        step = (step * 2.0).min(1e3);
        let mut t = step;
        let mut moved = false;
        for _ in 0..200 {
            let trial = &x - t * &g;
            let tv = centralized_reduced_value(p, &trial, inner_tol)?;
            if tv <= value - 1e-4 * t * g.norm_squared() {
                x = trial;
                value = tv;
                step = t;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // gradient step cannot improve further at double precision
            return Ok((x, value));
        }
    }
    Ok((x, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dagm_core::graph::Graph;
    use dagm_core::problem::quad_bilevel_random;

    fn setup(n: usize, d1: usize, d2: usize, seed: u64) -> (BilevelProblem, MixingMatrix) {
        let p = quad_bilevel_random(n, d1, d2, 0.5, seed).unwrap();
        let g = Graph::random_connected(n, 0.6, seed ^ 0xabcd).unwrap();
        (p, MixingMatrix::metropolis(&g))
    }

    fn zero_state(p: &BilevelProblem) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        (
            vec![DVector::zeros(p.d1()); p.n()],
            vec![DVector::zeros(p.d2()); p.n()],
        )
    }

    #[test]
    fn splitting_identity_holds_exactly() {
        let (p, w) = setup(5, 2, 3, 1);
        let (x, y) = zero_state(&p);
        let sys = dense_assemble(&p, &w, 0.4, &x, &y).unwrap();
        let diff = &sys.d - &sys.b - &sys.h;
        assert!(diff.norm() <= 1e-14, "H must equal D - B, diff {}", diff.norm());
    }

    #[test]
    fn truncated_series_converges_to_exact_inverse_product() {
        let (p, w) = setup(4, 2, 2, 2);
        let (x, y) = zero_state(&p);
        // rho < 1 requires beta large enough relative to the self-weight spread
        let beta = 0.8;
        let sys = dense_assemble(&p, &w, beta, &x, &y).unwrap();
        let rhs = DVector::from_fn(sys.n * sys.d2, |i, _| (i as f64 * 0.7).sin());
        let exact = dense_ihgp(&sys, &rhs).unwrap();
        let truncated = dense_truncated_neumann(&sys, &rhs, 400).unwrap();
        assert!(
            (exact.clone() - truncated).norm() <= 1e-9 * exact.norm().max(1.0),
            "series limit must agree with the dense solve"
        );
    }

    #[test]
    fn caps_are_enforced_loudly() {
        let p = quad_bilevel_random(17, 2, 2, 0.5, 3).unwrap();
        let g = Graph::random_connected(17, 0.5, 4).unwrap();
        let w = MixingMatrix::metropolis(&g);
        let (x, y) = zero_state(&p);
        match dense_assemble(&p, &w, 0.5, &x, &y) {
            Err(OracleError::TooLarge(_)) => {}
            other => panic!("expected TooLarge, got {other:?}"),
        }

        let p = quad_bilevel_random(4, 9, 2, 0.5, 5).unwrap();
        let g = Graph::random_connected(4, 0.5, 6).unwrap();
        let w = MixingMatrix::metropolis(&g);
        let (x, y) = zero_state(&p);
        assert!(matches!(dense_assemble(&p, &w, 0.5, &x, &y), Err(OracleError::TooLarge(_))));
    }

    #[test]
    fn penalized_inner_newton_matches_linear_solve_on_quads() {
        let (p, w) = setup(5, 3, 2, 7);
        let beta = 0.3;
        let x: Vec<DVector<f64>> =
            (0..5).map(|i| DVector::from_fn(3, |k, _| ((i + k) as f64 * 0.3).cos())).collect();
        let y = dense_penalized_inner(&p, &w, beta, &x, 1e-12, None).unwrap();
        // optimality: (1/beta)(I-W)y + grad g = 0
        let iw = i_minus_w_kron(&w, 2);
        let yf = flatten(&y);
        let mut g = &iw * &yf / beta;
        for i in 0..5 {
            let gi = p.local(i).grad_g_y(&x[i], &y[i]);
            for k in 0..2 {
                g[i * 2 + k] += gi[k];
            }
        }
        assert!(g.norm() <= 1e-10, "stationarity residual {}", g.norm());
    }

    #[test]
    fn fd_hypergradient_epsilon_sweep_is_stable_on_quads() {
        let (p, w) = setup(3, 2, 2, 11);
        let x: Vec<DVector<f64>> =
            (0..3).map(|i| DVector::from_fn(2, |k, _| 0.2 * (i as f64) - 0.1 * k as f64)).collect();
        let g3 = fd_hypergradient(&p, &w, 0.1, 0.4, &x, 1e-3).unwrap();
        let g5 = fd_hypergradient(&p, &w, 0.1, 0.4, &x, 1e-5).unwrap();
        let diff: f64 = g3
            .iter()
            .zip(&g5)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        let scale = g5.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
        // the outer value is quadratic in x, so central differences are
        // exact up to the inner-solve tolerance
        assert!(diff <= 1e-6 * scale.max(1.0), "eps sweep moved by {diff}");
    }

    #[test]
    fn centralized_gd_matches_quad_closed_form() {
        let p = quad_bilevel_random(4, 3, 3, 0.7, 13).unwrap();
        let (x, value) = centralized_bilevel_gd(&p, 1e-11, 20_000).unwrap();
        let cf = p.quad_closed_form().unwrap();
        assert!(
            (x.clone() - cf.x_star()).norm() <= 1e-8,
            "gd endpoint {x} vs closed form {}",
            cf.x_star()
        );
        assert!((value - cf.f_star()).abs() <= 1e-10);
    }
}
