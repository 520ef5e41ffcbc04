//! Closed-form theoretical constants of the method.
//!
//! Everything here is formula evaluation on declared problem constants and
//! mixing-matrix spectra: the inner contraction constant and penalty step cap,
//! the Lipschitz modulus of the penalized outer gradient, the truncation
//! amplification factor, the strongly-convex rate, and the
//! communication-complexity rows used for comparison tables. No iteration
//! happens here; solvers and diagnostics consume these values.

use crate::penalty::{neumann_bounds, rho_bound};
use crate::{DagmError, Result};
use dagm_core::graph::MixingMatrix;
use dagm_core::problem::ProblemConstants;
use std::fmt;

/// Inner contraction constant and the penalty step cap derived from it.
#[derive(Debug, Clone, Copy)]
pub struct BetaCap {
    /// b_g = lambda_hat_min(I - W) + mu_g L_g / (mu_g + L_g); the smallest
    /// nonzero eigenvalue term drops out on a single node where I - W = 0.
    pub b_g: f64,
    /// beta_bar = min{ b_g / (lambda_max(I - W) L_g), 2 / (mu_g + L_g),
    /// 1 / b_g, 1 }; the first term is skipped when I - W = 0.
    pub beta_bar: f64,
    /// Smallest nonzero eigenvalue of I - W (None for n = 1).
    pub lambda_hat_min: Option<f64>,
    /// Largest eigenvalue of I - W.
    pub lambda_max: f64,
}

pub fn beta_cap(c: &ProblemConstants, w: &MixingMatrix) -> Result<BetaCap> {
    if !(c.mu_g > 0.0 && c.l_g > 0.0 && c.l_g.is_finite()) {
        return Err(DagmError::InvalidParameter(format!(
            "beta cap needs mu_g > 0 and finite L_g > 0, got mu_g = {}, L_g = {}",
            c.mu_g, c.l_g
        )));
    }
    let eigs = w.i_minus_w_eigs()?;
    let harmonic = c.mu_g * c.l_g / (c.mu_g + c.l_g);
    let b_g = eigs.lambda_hat_min.unwrap_or(0.0) + harmonic;
    let mut beta_bar = (2.0 / (c.mu_g + c.l_g)).min(1.0 / b_g).min(1.0);
    if eigs.lambda_max > 0.0 {
        beta_bar = beta_bar.min(b_g / (eigs.lambda_max * c.l_g));
    }
    Ok(BetaCap { b_g, beta_bar, lambda_hat_min: eigs.lambda_hat_min, lambda_max: eigs.lambda_max })
}

/// The full constant table at a given (beta, alpha, U).
#[derive(Debug, Clone)]
pub struct TheoryConstants {
    pub n: usize,
    pub sigma: f64,
    pub theta: f64,
    pub big_theta: f64,
    /// Series contraction factor 2 (1 - theta) / (2 (1 - Theta) + beta mu_g).
    pub rho: f64,
    /// Eigenvalue bounds of the truncated approximate inverse at order U.
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub b_g: f64,
    pub beta_bar: f64,
    /// Strong-convexity modulus of the penalized inner objective:
    /// lambda_hat_min(I - W) + mu_g.
    pub mu_big_g: f64,
    /// Surrogate-vs-exact gradient coupling constant:
    /// C = L_fx + C_gxy L_fy / mu_G + C_fy (L_gxy / mu_G + C_gxy L_gyy / mu_G^2).
    pub coupling: f64,
    /// Lipschitz modulus of the penalized outer gradient:
    /// L_F = (L_fy + C) C_gxy / mu_G + L_fx
    ///       + C_fy (L_gxy C_fy / mu_G + C_gxy L_gyy / mu_G^2).
    pub l_big_f: f64,
    /// Lipschitz modulus of the penalized inner optimum in x: C_gxy / mu_g.
    pub varrho: f64,
    /// Truncation amplification
    /// eta = beta n^2 C_gxy C_fy / ((2 (1 - Theta) + beta mu_g)(1 - rho));
    /// None when rho >= 1 (the series diverges, eta is meaningless).
    pub eta: Option<f64>,
    /// C_tilde = C_fx + 2 C_gxy Lambda C_fy / (mu_g + L_g).
    pub c_tilde: f64,
    /// C_hat = C_fx + C_fy.
    pub c_hat: f64,
    /// mu_F = mu_f + (1 - sigma) / (2 alpha); requires a declared mu_f.
    pub mu_big_f: Option<f64>,
    /// Strongly-convex rate nu = min{alpha mu_F, beta b_g}.
    pub nu: Option<f64>,
    /// Whether the series contracts (rho < 1).
    pub contraction: bool,
    /// Whether the supplied beta exceeds the cap beta_bar.
    pub beta_above_cap: bool,
}

pub fn theory_constants(
    c: &ProblemConstants,
    w: &MixingMatrix,
    beta: f64,
    alpha: f64,
    u: usize,
) -> Result<TheoryConstants> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(DagmError::InvalidParameter(format!("alpha must be positive, got {alpha}")));
    }
    let cap = beta_cap(c, w)?;
    let rho = rho_bound(w.theta(), w.big_theta(), beta, c.mu_g)?;
    let nb = neumann_bounds(w.theta(), w.big_theta(), beta, c.mu_g, c.c_gyy, u)?;
    let sigma = w.spectral_gap_sigma()?;
    let mu_big_g = cap.lambda_hat_min.unwrap_or(0.0) + c.mu_g;
    let coupling = c.l_fx
        + c.c_gxy * c.l_fy / mu_big_g
        + c.c_fy * (c.l_gxy / mu_big_g + c.c_gxy * c.l_gyy / mu_big_g.powi(2));
    let l_big_f = (c.l_fy + coupling) * c.c_gxy / mu_big_g
        + c.l_fx
        + c.c_fy * (c.l_gxy * c.c_fy / mu_big_g + c.c_gxy * c.l_gyy / mu_big_g.powi(2));
    let n = w.n();
    let eta = if rho < 1.0 {
        Some(
            beta * (n * n) as f64 * c.c_gxy * c.c_fy
                / ((2.0 * (1.0 - w.big_theta()) + beta * c.mu_g) * (1.0 - rho)),
        )
    } else {
        None
    };
    let c_tilde = c.c_fx + 2.0 * c.c_gxy * nb.lambda_max * c.c_fy / (c.mu_g + c.l_g);
    let c_hat = c.c_fx + c.c_fy;
    let mu_big_f = c.mu_f.map(|mu_f| mu_f + (1.0 - sigma) / (2.0 * alpha));
    let nu = mu_big_f.map(|mf| (alpha * mf).min(beta * cap.b_g));
    Ok(TheoryConstants {
        n,
        sigma,
        theta: w.theta(),
        big_theta: w.big_theta(),
        rho,
        lambda_min: nb.lambda_min,
        lambda_max: nb.lambda_max,
        b_g: cap.b_g,
        beta_bar: cap.beta_bar,
        mu_big_g,
        coupling,
        l_big_f,
        varrho: c.c_gxy / c.mu_g,
        eta,
        c_tilde,
        c_hat,
        mu_big_f,
        nu,
        contraction: rho < 1.0,
        beta_above_cap: beta > cap.beta_bar * (1.0 + 1e-12),
    })
}

impl fmt::Display for TheoryConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "theoretical constants")?;
        writeln!(f, "  n (nodes)                          {:>14}", self.n)?;
        writeln!(f, "  sigma (mixing contraction)         {:>14.6e}", self.sigma)?;
        writeln!(f, "  theta / Theta (self-weight range)  {:.6e} / {:.6e}", self.theta, self.big_theta)?;
        writeln!(f, "  rho (series contraction)           {:>14.6e}", self.rho)?;
        writeln!(f, "  lambda_min (inverse lower bound)   {:>14.6e}", self.lambda_min)?;
        writeln!(f, "  lambda_max (inverse upper bound)   {:>14.6e}", self.lambda_max)?;
        writeln!(f, "  b_g (inner contraction constant)   {:>14.6e}", self.b_g)?;
        writeln!(f, "  beta_bar (penalty step cap)        {:>14.6e}", self.beta_bar)?;
        writeln!(f, "  mu_G (inner strong convexity)      {:>14.6e}", self.mu_big_g)?;
        writeln!(f, "  C (gradient coupling)              {:>14.6e}", self.coupling)?;
        writeln!(f, "  L_F (outer gradient Lipschitz)     {:>14.6e}", self.l_big_f)?;
        writeln!(f, "  varrho (inner optimum Lipschitz)   {:>14.6e}", self.varrho)?;
        match self.eta {
            Some(eta) => writeln!(f, "  eta (truncation amplification)     {:>14.6e}", eta)?,
            None => writeln!(f, "  eta (truncation amplification)        undefined (rho >= 1)")?,
        }
        writeln!(f, "  C_tilde (penalty drift constant)   {:>14.6e}", self.c_tilde)?;
        writeln!(f, "  C_hat (gradient norm cap)          {:>14.6e}", self.c_hat)?;
        match (self.mu_big_f, self.nu) {
            (Some(mf), Some(nu)) => {
                writeln!(f, "  mu_F (outer strong convexity)      {:>14.6e}", mf)?;
                writeln!(f, "  nu (strongly-convex rate)          {:>14.6e}", nu)?;
            }
            _ => writeln!(f, "  mu_F, nu                              undeclared (no mu_f)")?,
        }
        if !self.contraction {
            writeln!(f, "  WARNING: rho >= 1; the truncated series carries no guarantee here")?;
        }
        if self.beta_above_cap {
            writeln!(
                f,
                "  WARNING: beta exceeds the step cap beta_bar = min{{b_g/(lambda_max(I-W) L_g), 2/(mu_g+L_g), 1/b_g, 1}}"
            )?;
        }
        Ok(())
    }
}

/// Communication-complexity rows for reaching an epsilon-stationary point,
/// with all big-O constants set to 1.
#[derive(Debug, Clone, Copy)]
pub struct ComplexityTable {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub eps: f64,
    pub sigma: f64,
    /// (1 / (n eps (1-sigma)^2)) ((d1 + d2) ln(1/eps) + d1)
    pub dagm: f64,
    /// (1 / (eps (1-sigma)^2)) (d2^2 ln(1/eps) + d1 d2)
    pub dgbo: f64,
    /// (1 / (eps (1-sigma)^2)) (d1 d2 ln(1/eps) + d1)
    pub dgtbo: f64,
}

pub fn complexity_table(
    n: usize,
    d1: usize,
    d2: usize,
    eps: f64,
    sigma: f64,
) -> Result<ComplexityTable> {
    if n == 0 || d1 == 0 || d2 == 0 {
        return Err(DagmError::InvalidParameter("n, d1, d2 must be positive".into()));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(DagmError::InvalidParameter(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(0.0..1.0).contains(&sigma) {
        return Err(DagmError::InvalidParameter(format!("sigma must lie in [0, 1), got {sigma}")));
    }
    let gap_sq = (1.0 - sigma).powi(2);
    let log_term = (1.0 / eps).ln();
    let (d1f, d2f) = (d1 as f64, d2 as f64);
    Ok(ComplexityTable {
        n,
        d1,
        d2,
        eps,
        sigma,
        dagm: ((d1f + d2f) * log_term + d1f) / (n as f64 * eps * gap_sq),
        dgbo: (d2f * d2f * log_term + d1f * d2f) / (eps * gap_sq),
        dgtbo: (d1f * d2f * log_term + d1f) / (eps * gap_sq),
    })
}

impl fmt::Display for ComplexityTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "communication complexity to reach an {:.1e}-stationary point (n = {}, d1 = {}, d2 = {}, sigma = {}):",
            self.eps, self.n, self.d1, self.d2, self.sigma
        )?;
        writeln!(f, "  this method  (1/(n eps (1-sigma)^2)) ((d1+d2) ln(1/eps) + d1)  = {:.6e}", self.dagm)?;
        writeln!(f, "  gossip-based (1/(eps (1-sigma)^2)) (d2^2 ln(1/eps) + d1 d2)    = {:.6e}", self.dgbo)?;
        writeln!(f, "  tracking-based (1/(eps (1-sigma)^2)) (d1 d2 ln(1/eps) + d1)    = {:.6e}", self.dgtbo)?;
        Ok(())
    }
}

/// Exact neighbor-normalized communication prediction for one run:
/// K ((U + 1) d1 + M d2). The run counters divided by the total degree must
/// reproduce this integer exactly.
pub fn counter_prediction(k: u64, u: u64, m: u64, d1: u64, d2: u64) -> u64 {
    k * ((u + 1) * d1 + m * d2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dagm_core::graph::Graph;
    use dagm_core::problem::quad_bilevel_random;

    #[test]
    fn three_path_beta_cap_hand_values() {
        // I - W on the Metropolis 3-path has eigenvalues {0, 1/3, 1}; with
        // mu_g = L_g = 1 the harmonic term is 1/2, so b_g = 1/3 + 1/2 = 5/6
        // and beta_bar = min{(5/6)/1, 1, 6/5, 1} = 5/6
        let p = quad_bilevel_random(3, 2, 2, 0.5, 31).unwrap();
        let w = MixingMatrix::metropolis(&Graph::path(3));
        let cap = beta_cap(p.constants(), &w).unwrap();
        assert!((cap.b_g - 5.0 / 6.0).abs() <= 1e-12);
        assert!((cap.beta_bar - 5.0 / 6.0).abs() <= 1e-12);
        assert!((cap.lambda_max - 1.0).abs() <= 1e-10);
        assert!((cap.lambda_hat_min.unwrap() - 1.0 / 3.0).abs() <= 1e-10);
    }

    #[test]
    fn single_node_cap_falls_back_to_the_harmonic_mean() {
        let p = quad_bilevel_random(1, 2, 2, 0.5, 32).unwrap();
        let w = MixingMatrix::metropolis(&Graph::complete(1));
        let cap = beta_cap(p.constants(), &w).unwrap();
        assert!(cap.lambda_hat_min.is_none());
        assert!((cap.b_g - 0.5).abs() <= 1e-14);
        // min{skip, 1, 2, 1} = 1
        assert!((cap.beta_bar - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn constant_table_hand_example() {
        // mu_g = L_g = C_gyy = 1, theta = Theta = 1/2, beta = 1:
        // rho = 2 (1/2) / (2 (1/2) + 1) = 1/2 and lambda_min = 1/(1 + 1) = 1/2
        let p = quad_bilevel_random(2, 2, 2, 0.5, 33).unwrap();
        let w = MixingMatrix::metropolis(&Graph::complete(2));
        assert!((w.theta() - 0.5).abs() <= 1e-15);
        assert!((w.big_theta() - 0.5).abs() <= 1e-15);
        let t = theory_constants(p.constants(), &w, 1.0, 0.1, 0).unwrap();
        assert!((t.rho - 0.5).abs() <= 1e-14);
        assert!((t.lambda_min - 0.5).abs() <= 1e-14);
        // U = 0 keeps one series term: Lambda = 1 / (2 (1 - Theta) + beta mu_g)
        assert!((t.lambda_max - 0.5).abs() <= 1e-14);
        assert!(t.contraction);
    }

    #[test]
    fn quad_varrho_is_bounded_by_one_for_unit_operators() {
        // the quad family declares C_gxy = max_i ||A_i|| and mu_g = 1, so
        // instances scaled to ||A_i|| <= 1 give varrho <= 1
        for seed in 0..5 {
            let p = quad_bilevel_random(3, 2, 2, 0.5, seed).unwrap();
            let w = MixingMatrix::metropolis(&Graph::path(3));
            let t = theory_constants(p.constants(), &w, 0.8, 0.1, 2).unwrap();
            let c_gxy = p.constants().c_gxy;
            assert!((t.varrho - c_gxy).abs() <= 1e-14);
            if c_gxy <= 1.0 {
                assert!(t.varrho <= 1.0);
            }
        }
    }

    #[test]
    fn outer_lipschitz_formula_on_the_identity_quad() {
        // single node, A = I, ridge 1: mu_G = 1, C = L_fx + C_gxy L_fy = 2,
        // L_F = (L_fy + C) C_gxy + L_fx = 4, an upper bound on the true
        // reduced-Hessian norm 2
        use dagm_core::problem::quad_bilevel;
        use nalgebra::{DMatrix, DVector};
        let p = quad_bilevel(
            vec![DMatrix::identity(2, 2)],
            vec![DVector::zeros(2)],
            vec![DVector::from_element(2, 1.0)],
            1.0,
        )
        .unwrap();
        let w = MixingMatrix::metropolis(&Graph::complete(1));
        let t = theory_constants(p.constants(), &w, 0.5, 0.1, 0).unwrap();
        assert!((t.coupling - 2.0).abs() <= 1e-12);
        assert!((t.l_big_f - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn rho_at_least_one_disables_eta_and_flags() {
        let p = quad_bilevel_random(3, 2, 2, 0.5, 34).unwrap();
        let w = MixingMatrix::metropolis(&Graph::path(3));
        // 3-path needs beta > 2/3 for contraction; 0.1 fails
        let t = theory_constants(p.constants(), &w, 0.1, 0.1, 2).unwrap();
        assert!(!t.contraction);
        assert!(t.eta.is_none());
        assert!((t.rho - 2.0 * (2.0 / 3.0) / (2.0 / 3.0 + 0.1)).abs() <= 1e-12);
    }

    #[test]
    fn complexity_rows_evaluate_and_diverge_with_sigma() {
        let t = complexity_table(10, 100, 100, 1e-2, 0.5).unwrap();
        let log_term = (1.0f64 / 1e-2).ln();
        let expected_dagm = (200.0 * log_term + 100.0) / (10.0 * 1e-2 * 0.25);
        assert!((t.dagm - expected_dagm).abs() <= 1e-9 * expected_dagm);
        // d2 >> d1 makes the quadratic-in-d2 row dominate
        let skew = complexity_table(4, 2, 200, 1e-2, 0.5).unwrap();
        assert!(skew.dgbo > skew.dagm * 4.0);
        // sigma -> 1 blows every row up
        let tight = complexity_table(10, 100, 100, 1e-2, 0.999).unwrap();
        assert!(tight.dagm > t.dagm * 1e4);
        assert!(complexity_table(10, 2, 2, 1e-2, 1.0).is_err());
        assert!(complexity_table(0, 2, 2, 1e-2, 0.5).is_err());
    }

    #[test]
    fn counter_prediction_matches_hand_arithmetic() {
        assert_eq!(counter_prediction(100, 3, 5, 2, 2), 100 * (4 * 2 + 5 * 2));
        assert_eq!(counter_prediction(0, 3, 5, 2, 2), 0);
    }
}
