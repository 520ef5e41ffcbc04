//! Bilevel problem families.
//!
//! Each node i owns a smooth pair (f_i, g_i): the outer objective f_i(x, y)
//! and an inner objective g_i(x, y) that is (ideally strongly) convex in y.
//! Solvers only touch the oracle surface below: values, first derivatives,
//! and the two second derivatives of g that the hypergradient needs.
//!
//! Two concrete families are provided:
//!  * `quad_bilevel`: g_i = 1/2 ||y - A_i x - b_i||^2, f_i = 1/2 ||y - c_i||^2
//!    + (reg/2) ||x||^2, with closed-form inner solutions and a closed-form
//!    centralized optimum for cross-checking.
//!  * `ho_problem`: hyperparameter optimization where g_i is a training loss
//!    plus the linear-in-y regularizer y^T exp(x) and f_i is a validation
//!    loss; the loss menu covers linear (squared), logistic, a smoothed
//!    (squared-hinge) SVM, and softmax cross-entropy.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::fmt;
use std::sync::Arc;

use crate::{CoreError, Result};

/// Per-node objective pair oracle surface.
///
/// Shapes: x in R^{d1}, y in R^{d2}; `jac_g_xy` is the d1 x d2 mixed second
/// derivative of g (rows index x, columns index y) and `hess_g_yy` is d2 x d2.
pub trait LocalObjective: Send + Sync {
    fn f_val(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn grad_f_x(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn grad_f_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn g_val(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;
    fn grad_g_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64>;
    fn jac_g_xy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
    fn hess_g_yy(&self, x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64>;
}

/// Declared smoothness and boundedness constants for a problem instance.
///
/// All values are nonnegative and finite unless noted. For families whose
/// true suprema are infinite (quadratic gradients grow linearly; exp(x) is
/// unbounded) the norm bounds are certified over the Euclidean ball of radius
/// [`BilevelProblem::certification_radius`], and `verify_constants` samples
/// inside that same ball. `mu_g = 0` marks an inner problem that is convex
/// but not strongly convex (softmax cross-entropy is structurally singular
/// because shifting all logits leaves the loss unchanged).
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConstants {
    /// Strong-convexity modulus of g_i(x, .).
    pub mu_g: f64,
    /// Lipschitz constant of grad_y g_i(x, .).
    pub l_g: f64,
    /// Upper eigenvalue bound of hess_yy g_i.
    pub c_gyy: f64,
    /// Spectral-norm bound of the mixed derivative of g_i.
    pub c_gxy: f64,
    /// Norm bound of grad_x f_i over the certification ball.
    pub c_fx: f64,
    /// Norm bound of grad_y f_i over the certification ball.
    pub c_fy: f64,
    /// Lipschitz constant of grad_x f_i in either argument (the larger of the
    /// per-argument moduli; downstream smoothness bounds use both directions).
    pub l_fx: f64,
    /// Lipschitz constant of grad_y f_i in either argument.
    pub l_fy: f64,
    /// Lipschitz constant of the mixed derivative of g_i in either argument.
    pub l_gxy: f64,
    /// Lipschitz constant of hess_yy g_i in either argument. Infinite when
    /// the Hessian is discontinuous (squared hinge).
    pub l_gyy: f64,
    /// Strong-convexity modulus of f_i in x when available.
    pub mu_f: Option<f64>,
}

impl ProblemConstants {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.mu_g, self.l_g, self.c_gyy, self.c_gxy, self.c_fx, self.c_fy, self.l_fx,
            self.l_fy, self.l_gxy,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidParameter(
                "constants must be finite and nonnegative (l_gyy may be infinite)".into(),
            ));
        }
        if self.l_gyy < 0.0 || self.l_gyy.is_nan() {
            return Err(CoreError::InvalidParameter("l_gyy must be nonnegative".into()));
        }
        if self.mu_g > self.c_gyy + 1e-12 {
            return Err(CoreError::InvalidParameter(format!(
                "mu_g = {} exceeds the Hessian upper bound c_gyy = {}",
                self.mu_g, self.c_gyy
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// BilevelProblem
// ---------------------------------------------------------------------------

/// A concrete n-node bilevel instance: local objective oracles plus declared
/// constants, and (when the family admits one) closed-form reference data.
pub struct BilevelProblem {
    d1: usize,
    d2: usize,
    locals: Vec<Arc<dyn LocalObjective>>,
    constants: ProblemConstants,
    certification_radius: f64,
    quad: Option<QuadClosedForm>,
    ho: Option<HoHandle>,
}

impl BilevelProblem {
    /// Assembles an instance from hand-built local objectives. The declared
    /// constants are taken on trust here; `verify_constants` can audit them.
    pub fn from_parts(
        d1: usize,
        d2: usize,
        locals: Vec<Arc<dyn LocalObjective>>,
        constants: ProblemConstants,
        certification_radius: f64,
    ) -> Self {
        BilevelProblem { d1, d2, locals, constants, certification_radius, quad: None, ho: None }
    }

    pub fn n(&self) -> usize {
        self.locals.len()
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn local(&self, i: usize) -> &dyn LocalObjective {
        self.locals[i].as_ref()
    }

    pub fn constants(&self) -> &ProblemConstants {
        &self.constants
    }

    /// Radius of the Euclidean balls over which the norm-type constants are
    /// certified; `verify_constants` samples inside this ball.
    pub fn certification_radius(&self) -> f64 {
        self.certification_radius
    }

    /// Closed-form reference data when the instance is quadratic.
    pub fn quad_closed_form(&self) -> Option<&QuadClosedForm> {
        self.quad.as_ref()
    }

    /// Loss and dataset handle when the instance is a hyperparameter problem.
    pub fn ho_instance(&self) -> Option<&HoHandle> {
        self.ho.as_ref()
    }

    /// Sum of local outer values at per-node blocks.
    pub fn sum_f(&self, x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
        (0..self.n()).map(|i| self.locals[i].f_val(&x[i], &y[i])).sum()
    }

    /// Sum of local inner values at per-node blocks.
    pub fn sum_g(&self, x: &[DVector<f64>], y: &[DVector<f64>]) -> f64 {
        (0..self.n()).map(|i| self.locals[i].g_val(&x[i], &y[i])).sum()
    }
}

impl fmt::Debug for BilevelProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BilevelProblem")
            .field("n", &self.n())
            .field("d1", &self.d1)
            .field("d2", &self.d2)
            .field("family", &if self.quad.is_some() { "quad" } else { "ho" })
            .finish()
    }
}

// ---------------------------------------------------------------------------
// Quadratic family
// ---------------------------------------------------------------------------

struct QuadLocal {
    a: DMatrix<f64>,  // d2 x d1
    b: DVector<f64>,  // d2
    c: DVector<f64>,  // d2
    reg: f64,
}

impl LocalObjective for QuadLocal {
    fn f_val(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        0.5 * (y - &self.c).norm_squared() + 0.5 * self.reg * x.norm_squared()
    }

    fn grad_f_x(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        self.reg * x
    }

    fn grad_f_y(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        y - &self.c
    }

    fn g_val(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        0.5 * (y - &self.a * x - &self.b).norm_squared()
    }

    fn grad_g_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        y - &self.a * x - &self.b
    }

    fn jac_g_xy(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        // d/dx of (y - Ax - b) viewed row-per-x-coordinate: -A^T
        -self.a.transpose()
    }

    fn hess_g_yy(&self, _x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::identity(self.b.len(), self.b.len())
    }
}

/// Closed-form reference for the quadratic family. The centralized inner
/// solution is y*(x) = A_bar x + b_bar and the reduced objective is
/// phi(x) = (1/2n) sum_i ||A_bar x + b_bar - c_i||^2 + (reg/2) ||x||^2.
#[derive(Debug, Clone)]
pub struct QuadClosedForm {
    pub a_bar: DMatrix<f64>,
    pub b_bar: DVector<f64>,
    pub c_bar: DVector<f64>,
    pub reg: f64,
    /// True when reg = 0 forced the minimum-norm (pseudo-inverse) solution.
    pub pinv_path: bool,
    c_all: Vec<DVector<f64>>,
}

impl QuadClosedForm {
    /// Centralized inner solution at consensus x.
    pub fn y_star(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a_bar * x + &self.b_bar
    }

    /// Reduced objective phi(x) = mean_i f_i(x, y*(x)).
    pub fn reduced_value(&self, x: &DVector<f64>) -> f64 {
        let v = self.y_star(x);
        let n = self.c_all.len() as f64;
        let data: f64 = self.c_all.iter().map(|c| 0.5 * (&v - c).norm_squared()).sum();
        data / n + 0.5 * self.reg * x.norm_squared()
    }

    pub fn reduced_grad(&self, x: &DVector<f64>) -> DVector<f64> {
        self.a_bar.transpose() * (self.y_star(x) - &self.c_bar) + self.reg * x
    }

    /// Minimizer of the reduced objective. Solves the d1 x d1 normal system;
    /// falls back to the SVD minimum-norm solution when reg = 0 leaves it
    /// singular.
    pub fn x_star(&self) -> DVector<f64> {
        let d1 = self.a_bar.ncols();
        let lhs = self.a_bar.transpose() * &self.a_bar + DMatrix::identity(d1, d1) * self.reg;
        let rhs = self.a_bar.transpose() * (&self.c_bar - &self.b_bar);
        if self.reg > 0.0 {
            if let Some(chol) = lhs.clone().cholesky() {
                return chol.solve(&rhs);
            }
        }
        lhs.svd(true, true)
            .solve(&rhs, 1e-14)
            .expect("SVD least-squares solve cannot fail")
    }

    pub fn f_star(&self) -> f64 {
        self.reduced_value(&self.x_star())
    }
}

/// Builds the quadratic family. `a[i]` must be d2 x d1; `b[i]`, `c[i]` live in
/// R^{d2}. Declared constants are exact except for the two gradient-norm
/// bounds, which hold over the certification ball.
pub fn quad_bilevel(
    a: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    c: Vec<DVector<f64>>,
    reg: f64,
) -> Result<BilevelProblem> {
    let n = a.len();
    if n == 0 || b.len() != n || c.len() != n {
        return Err(CoreError::DimensionMismatch(
            "need matching, nonempty A/b/c collections".into(),
        ));
    }
    if !(reg >= 0.0) || !reg.is_finite() {
        return Err(CoreError::InvalidParameter(format!("reg must be finite and >= 0, got {reg}")));
    }
    let d2 = a[0].nrows();
    let d1 = a[0].ncols();
    if d1 == 0 || d2 == 0 {
        return Err(CoreError::InvalidParameter("dimensions must be positive".into()));
    }
    for i in 0..n {
        if a[i].nrows() != d2 || a[i].ncols() != d1 || b[i].len() != d2 || c[i].len() != d2 {
            return Err(CoreError::DimensionMismatch(format!("inconsistent shapes at node {i}")));
        }
    }

    let radius = 10.0;
    let c_gxy = a.iter().map(|m| spectral_norm(m)).fold(0.0_f64, f64::max);
    let max_c = c.iter().map(|v| v.norm()).fold(0.0_f64, f64::max);
    let constants = ProblemConstants {
        mu_g: 1.0,
        l_g: 1.0,
        c_gyy: 1.0,
        c_gxy,
        c_fx: reg * radius,
        c_fy: radius + max_c,
        // grad_f_x = reg * x: reg-Lipschitz in x, constant in y
        l_fx: reg,
        l_fy: 1.0,
        l_gxy: 0.0,
        l_gyy: 0.0,
        mu_f: Some(reg),
    };
    constants.validate()?;

    let nf = n as f64;
    let a_bar = a.iter().fold(DMatrix::zeros(d2, d1), |acc, m| acc + m) / nf;
    let b_bar = b.iter().fold(DVector::zeros(d2), |acc, v| acc + v) / nf;
    let c_bar = c.iter().fold(DVector::zeros(d2), |acc, v| acc + v) / nf;
    let closed = QuadClosedForm {
        a_bar,
        b_bar,
        c_bar,
        reg,
        pinv_path: reg == 0.0,
        c_all: c.clone(),
    };

    let locals: Vec<Arc<dyn LocalObjective>> = (0..n)
        .map(|i| {
            Arc::new(QuadLocal { a: a[i].clone(), b: b[i].clone(), c: c[i].clone(), reg })
                as Arc<dyn LocalObjective>
        })
        .collect();

    Ok(BilevelProblem {
        d1,
        d2,
        locals,
        constants,
        certification_radius: radius,
        quad: Some(closed),
        ho: None,
    })
}

/// Random quadratic instance with standard-normal data, entries of A scaled
/// by 1/sqrt(max(d1, d2)) to keep spectral norms O(1). Deterministic per seed.
pub fn quad_bilevel_random(
    n: usize,
    d1: usize,
    d2: usize,
    reg: f64,
    seed: u64,
) -> Result<BilevelProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d1.max(d2) as f64).sqrt();
    let normal = StandardNormal;
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for _ in 0..n {
        a.push(DMatrix::from_fn(d2, d1, |_, _| {
            let g: f64 = normal.sample(&mut rng);
            g * scale
        }));
        b.push(DVector::from_fn(d2, |_, _| normal.sample(&mut rng)));
        c.push(DVector::from_fn(d2, |_, _| normal.sample(&mut rng)));
    }
    quad_bilevel(a, b, c, reg)
}

// ---------------------------------------------------------------------------
// Hyperparameter-optimization family
// ---------------------------------------------------------------------------

/// Loss menu for the hyperparameter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Squared error (y^T z - b)^2.
    Linear,
    /// log(1 + exp(-b y^T z)) with labels in {-1, +1}.
    Logistic,
    /// Squared hinge max(0, 1 - b y^T z)^2: a smooth SVM surrogate with a
    /// Lipschitz gradient (the plain hinge is not differentiable).
    SmoothedSvm,
    /// Softmax cross-entropy over `classes` classes; the parameter vector
    /// packs one weight row plus one bias per class, so its dimension is
    /// classes * (feature_dim + 1). Labels are integral class indices.
    Softmax { classes: usize },
}

impl Loss {
    /// Dimension of the parameter vector y for feature dimension `d`.
    pub fn param_dim(&self, d: usize) -> usize {
        match self {
            Loss::Softmax { classes } => classes * (d + 1),
            _ => d,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Loss::Linear => "linear",
            Loss::Logistic => "logistic",
            Loss::SmoothedSvm => "smoothed_svm",
            Loss::Softmax { .. } => "softmax",
        }
    }
}

/// One labeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub z: DVector<f64>,
    pub label: f64,
}

/// Per-agent train/validation split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Loss plus shared dataset handle for a hyperparameter instance.
#[derive(Clone)]
pub struct HoHandle {
    pub loss: Loss,
    pub data: Arc<Vec<AgentData>>,
}

impl HoHandle {
    /// Mean per-sample training loss across all agents at consensus y.
    pub fn mean_train_loss(&self, y: &DVector<f64>) -> f64 {
        mean_loss(self.loss, &self.data, y, true)
    }

    /// Mean per-sample validation loss across all agents at consensus y.
    pub fn mean_val_loss(&self, y: &DVector<f64>) -> f64 {
        mean_loss(self.loss, &self.data, y, false)
    }

    /// Mean squared prediction error over validation samples (regression use).
    pub fn val_mse(&self, y: &DVector<f64>) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for agent in self.data.iter() {
            for s in &agent.val {
                let r = y.dot(&s.z) - s.label;
                sum += r * r;
                count += 1;
            }
        }
        if count == 0 { f64::NAN } else { sum / count as f64 }
    }
}

fn mean_loss(loss: Loss, data: &[AgentData], y: &DVector<f64>, train: bool) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for agent in data {
        let split = if train { &agent.train } else { &agent.val };
        for s in split {
            sum += loss_value(loss, y, s);
            count += 1;
        }
    }
    if count == 0 { f64::NAN } else { sum / count as f64 }
}

// Per-sample value / gradient / Hessian in the parameter vector y.

fn loss_value(loss: Loss, y: &DVector<f64>, s: &Sample) -> f64 {
    match loss {
        Loss::Linear => {
            let r = y.dot(&s.z) - s.label;
            r * r
        }
        Loss::Logistic => {
            let m = s.label * y.dot(&s.z);
            // stable log(1 + exp(-m))
            if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() }
        }
        Loss::SmoothedSvm => {
            let t = 1.0 - s.label * y.dot(&s.z);
            let t = t.max(0.0);
            t * t
        }
        Loss::Softmax { classes } => {
            let (scores, _) = softmax_scores(classes, y, &s.z);
            let lse = log_sum_exp(&scores);
            lse - scores[s.label as usize]
        }
    }
}

fn loss_grad(loss: Loss, y: &DVector<f64>, s: &Sample) -> DVector<f64> {
    match loss {
        Loss::Linear => {
            let r = y.dot(&s.z) - s.label;
            2.0 * r * &s.z
        }
        Loss::Logistic => {
            let m = s.label * y.dot(&s.z);
            let sig = 1.0 / (1.0 + m.exp()); // sigmoid(-m)
            -s.label * sig * &s.z
        }
        Loss::SmoothedSvm => {
            let t = 1.0 - s.label * y.dot(&s.z);
            if t > 0.0 { -2.0 * s.label * t * &s.z } else { DVector::zeros(s.z.len()) }
        }
        Loss::Softmax { classes } => {
            let (scores, d) = softmax_scores(classes, y, &s.z);
            let p = softmax_probs(&scores);
            let mut grad = DVector::zeros(classes * (d + 1));
            for c in 0..classes {
                let coeff = p[c] - if c == s.label as usize { 1.0 } else { 0.0 };
                let base = c * (d + 1);
                for j in 0..d {
                    grad[base + j] = coeff * s.z[j];
                }
                grad[base + d] = coeff;
            }
            grad
        }
    }
}

fn loss_hess(loss: Loss, y: &DVector<f64>, s: &Sample) -> DMatrix<f64> {
    let d = s.z.len();
    match loss {
        Loss::Linear => 2.0 * &s.z * s.z.transpose(),
        Loss::Logistic => {
            let m = s.label * y.dot(&s.z);
            let sig = 1.0 / (1.0 + m.exp());
            sig * (1.0 - sig) * &s.z * s.z.transpose()
        }
        Loss::SmoothedSvm => {
            let t = 1.0 - s.label * y.dot(&s.z);
            if t > 0.0 { 2.0 * &s.z * s.z.transpose() } else { DMatrix::zeros(d, d) }
        }
        Loss::Softmax { classes } => {
            let (scores, d) = softmax_scores(classes, y, &s.z);
            let p = softmax_probs(&scores);
            let dim = classes * (d + 1);
            let mut h = DMatrix::zeros(dim, dim);
            // block (c, e) = (p_c [c=e] - p_c p_e) * zt zt^T with zt = [z; 1]
            let mut zt = DVector::zeros(d + 1);
            zt.rows_mut(0, d).copy_from(&s.z);
            zt[d] = 1.0;
            let outer = &zt * zt.transpose();
            for c in 0..classes {
                for e in 0..classes {
                    let coeff = if c == e { p[c] * (1.0 - p[c]) } else { -p[c] * p[e] };
                    let mut block = h.view_mut((c * (d + 1), e * (d + 1)), (d + 1, d + 1));
                    block += &outer * coeff;
                }
            }
            h
        }
    }
}

fn softmax_scores(classes: usize, y: &DVector<f64>, z: &DVector<f64>) -> (Vec<f64>, usize) {
    let d = z.len();
    debug_assert_eq!(y.len(), classes * (d + 1));
    let scores = (0..classes)
        .map(|c| {
            let base = c * (d + 1);
            let w = y.rows(base, d);
            w.dot(z) + y[base + d]
        })
        .collect();
    (scores, d)
}

fn softmax_probs(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

struct HoLocal {
    loss: Loss,
    data: Arc<Vec<AgentData>>,
    idx: usize,
    dim: usize,
}

impl HoLocal {
    fn train(&self) -> &[Sample] {
        &self.data[self.idx].train
    }

    fn val(&self) -> &[Sample] {
        &self.data[self.idx].val
    }
}

impl LocalObjective for HoLocal {
    fn f_val(&self, _x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.val().iter().map(|s| loss_value(self.loss, y, s)).sum()
    }

    fn grad_f_x(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }

    fn grad_f_y(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        self.val()
            .iter()
            .fold(DVector::zeros(self.dim), |acc, s| acc + loss_grad(self.loss, y, s))
    }

    fn g_val(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let train: f64 = self.train().iter().map(|s| loss_value(self.loss, y, s)).sum();
        train + y.dot(&x.map(f64::exp))
    }

    fn grad_g_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let mut grad = self
            .train()
            .iter()
            .fold(DVector::zeros(self.dim), |acc, s| acc + loss_grad(self.loss, y, s));
        grad += x.map(f64::exp);
        grad
    }

    fn jac_g_xy(&self, x: &DVector<f64>, _y: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&x.map(f64::exp))
    }

    fn hess_g_yy(&self, _x: &DVector<f64>, y: &DVector<f64>) -> DMatrix<f64> {
        self.train()
            .iter()
            .fold(DMatrix::zeros(self.dim, self.dim), |acc, s| acc + loss_hess(self.loss, y, s))
    }
}

/// Per-sample curvature cap: hess of the sample loss is bounded by
/// cap * z z^T (with the bias-extended z for softmax).
fn curvature_cap(loss: Loss) -> f64 {
    match loss {
        Loss::Linear | Loss::SmoothedSvm => 2.0,
        // sigmoid'(m) <= 1/4
        Loss::Logistic => 0.25,
        // diag(p) - p p^T has eigenvalues in [0, 1/2]
        Loss::Softmax { .. } => 0.5,
    }
}

fn gram_extremes(loss: Loss, samples: &[Sample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((0.0, 0.0));
    }
    let d = samples[0].z.len();
    let extended = matches!(loss, Loss::Softmax { .. });
    let dim = if extended { d + 1 } else { d };
    let mut gram = DMatrix::zeros(dim, dim);
    for s in samples {
        if extended {
            let mut zt = DVector::zeros(dim);
            zt.rows_mut(0, d).copy_from(&s.z);
            zt[d] = 1.0;
            gram += &zt * zt.transpose();
        } else {
            gram += &s.z * s.z.transpose();
        }
    }
    sym_eig_range(&gram)
}

/// Builds the hyperparameter instance from per-agent data. The inner
/// objective is the training loss plus y^T exp(x); both parameter vectors
/// share the dimension implied by the loss, which the exp(x) coupling needs.
pub fn ho_problem(loss: Loss, data: Vec<AgentData>) -> Result<BilevelProblem> {
    let n = data.len();
    if n == 0 {
        return Err(CoreError::InvalidParameter("need at least one agent".into()));
    }
    if let Loss::Softmax { classes } = loss {
        if classes < 2 {
            return Err(CoreError::InvalidParameter("softmax needs at least two classes".into()));
        }
    }
    let first = data
        .iter()
        .flat_map(|a| a.train.iter().chain(a.val.iter()))
        .next()
        .ok_or_else(|| CoreError::InvalidParameter("dataset is empty".into()))?;
    let d = first.z.len();
    if d == 0 {
        return Err(CoreError::InvalidParameter("features must be nonempty".into()));
    }
    for (i, agent) in data.iter().enumerate() {
        if agent.train.is_empty() {
            return Err(CoreError::InvalidParameter(format!("agent {i} has no training samples")));
        }
        for s in agent.train.iter().chain(agent.val.iter()) {
            if s.z.len() != d {
                return Err(CoreError::DimensionMismatch(format!(
                    "agent {i} has a sample of dimension {} (expected {d})",
                    s.z.len()
                )));
            }
            if !s.label.is_finite() || s.z.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::InvalidParameter(format!("agent {i} has a non-finite sample")));
            }
            match loss {
                Loss::Logistic | Loss::SmoothedSvm => {
                    if s.label != 1.0 && s.label != -1.0 {
                        return Err(CoreError::InvalidParameter(format!(
                            "{} labels must be +/-1, got {}",
                            loss.name(),
                            s.label
                        )));
                    }
                }
                Loss::Softmax { classes } => {
                    if s.label.fract() != 0.0 || s.label < 0.0 || s.label >= classes as f64 {
                        return Err(CoreError::InvalidParameter(format!(
                            "softmax labels must be integers in [0, {classes}), got {}",
                            s.label
                        )));
                    }
                }
                Loss::Linear => {}
            }
        }
    }

    let dim = loss.param_dim(d);
    let radius = 2.0;
    let cap = curvature_cap(loss);

    // Curvature caps: per-agent Gram extremes times the per-sample cap.
    let mut l_g = 0.0_f64;
    let mut mu_exact = f64::INFINITY; // exact lower bound, linear loss only
    let mut l_fy = 0.0_f64;
    let mut c_fy = 0.0_f64;
    let mut l_gyy_cubic = 0.0_f64;
    for agent in &data {
        let (lo_tr, hi_tr) = gram_extremes(loss, &agent.train)?;
        l_g = l_g.max(cap * hi_tr);
        mu_exact = mu_exact.min(cap * lo_tr);
        let (_, hi_val) = gram_extremes(loss, &agent.val)?;
        l_fy = l_fy.max(cap * hi_val);
        c_fy = c_fy.max(grad_norm_cap(loss, &agent.val, radius));
        l_gyy_cubic =
            l_gyy_cubic.max(agent.train.iter().map(|s| s.z.norm().powi(3)).sum::<f64>());
    }

    let mu_g = match loss {
        // constant Hessian: the Gram lower bound is exact everywhere
        Loss::Linear => mu_exact,
        // softmax is shift invariant in the logits, so its Hessian is
        // always singular; report the honest modulus of zero
        Loss::Softmax { .. } => 0.0,
        // position-dependent curvature: use a deterministic lower bound
        // valid everywhere on the certification ball
        Loss::Logistic | Loss::SmoothedSvm => {
            let mut lo = f64::INFINITY;
            for agent in &data {
                lo = lo.min(curvature_lower_bound(loss, &agent.train, radius)?);
            }
            lo.max(0.0)
        }
    };

    let l_gyy = match loss {
        Loss::Linear => 0.0,
        // |sigmoid''| <= 1/(6 sqrt(3)) < 0.1
        Loss::Logistic => 0.1 * l_gyy_cubic,
        // the squared-hinge Hessian jumps at the margin boundary
        Loss::SmoothedSvm => f64::INFINITY,
        // loose but valid third-derivative bound for softmax
        Loss::Softmax { .. } => l_gyy_cubic.max(1.0),
    };

    let constants = ProblemConstants {
        mu_g: mu_g.max(0.0),
        l_g,
        c_gyy: l_g,
        // ||diag(exp(x))|| <= exp(||x||) over the certification ball
        c_gxy: radius.exp(),
        c_fx: 0.0,
        c_fy,
        l_fx: 0.0,
        l_fy,
        // the mixed derivative diag(exp(x)) is constant in y and
        // exp(radius)-Lipschitz in x over the certification ball
        l_gxy: radius.exp(),
        l_gyy,
        mu_f: None,
    };
    constants.validate()?;

    let shared = Arc::new(data);
    let locals: Vec<Arc<dyn LocalObjective>> = (0..n)
        .map(|i| {
            Arc::new(HoLocal { loss, data: Arc::clone(&shared), idx: i, dim })
                as Arc<dyn LocalObjective>
        })
        .collect();

    Ok(BilevelProblem {
        d1: dim,
        d2: dim,
        locals,
        constants,
        certification_radius: radius,
        quad: None,
        ho: Some(HoHandle { loss, data: shared }),
    })
}

/// Valid bound for the validation gradient norm over ||y|| <= radius.
fn grad_norm_cap(loss: Loss, samples: &[Sample], radius: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let zn = s.z.norm();
            match loss {
                Loss::Linear => 2.0 * (radius * zn + s.label.abs()) * zn,
                Loss::Logistic => zn,
                Loss::SmoothedSvm => 2.0 * (1.0 + radius * zn) * zn,
                // the probability-residual vector has norm at most sqrt(2)
                Loss::Softmax { .. } => std::f64::consts::SQRT_2 * (zn * zn + 1.0).sqrt(),
            }
        })
        .sum()
}

/// Deterministic lower bound on the training-term curvature over the ball
/// ||y|| <= radius. For logistic, sigmoid'(m) is even and decreasing in |m|
/// and |m| <= radius ||z||, so sigmoid'(radius ||z||) z z^T is a valid
/// per-sample floor. For the squared hinge, a sample surely stays active
/// whenever its margin 1 - radius ||z|| remains positive; only those samples
/// count toward the floor.
fn curvature_lower_bound(loss: Loss, samples: &[Sample], radius: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let d = samples[0].z.len();
    let mut gram = DMatrix::zeros(d, d);
    for s in samples {
        let zn = s.z.norm();
        let weight = match loss {
            Loss::Logistic => {
                let sig = 1.0 / (1.0 + (radius * zn).exp());
                sig * (1.0 - sig)
            }
            Loss::SmoothedSvm => {
                if radius * zn < 1.0 { 2.0 } else { 0.0 }
            }
            _ => unreachable!("only the curved losses use this bound"),
        };
        if weight > 0.0 {
            gram += &s.z * s.z.transpose() * weight;
        }
    }
    Ok(sym_eig_range(&gram)?.0)
}

fn sample_in_ball(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> DVector<f64> {
    let normal = StandardNormal;
    let g = DVector::from_fn(dim, |_, _| normal.sample(rng));
    let norm = g.norm();
    if norm == 0.0 {
        return g;
    }
    let u: f64 = rng.gen();
    g * (radius * u.powf(1.0 / dim as f64) / norm)
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Synthetic linear-regression data: a standard-normal ground-truth signal,
/// standard-normal features, and responses z^T signal + noise * eps. Each
/// agent receives `samples_per_agent` training and as many validation samples.
/// Deterministic per seed. Returns the per-agent data and the signal.
pub fn synthetic_regression_data(
    n: usize,
    d: usize,
    noise: f64,
    samples_per_agent: usize,
    seed: u64,
) -> Result<(Vec<AgentData>, DVector<f64>)> {
    synthetic_data_impl(n, d, noise, samples_per_agent, seed, false)
}

/// Same generator with labels sign(z^T signal + noise * eps), for the
/// classification losses.
pub fn synthetic_classification_data(
    n: usize,
    d: usize,
    noise: f64,
    samples_per_agent: usize,
    seed: u64,
) -> Result<(Vec<AgentData>, DVector<f64>)> {
    synthetic_data_impl(n, d, noise, samples_per_agent, seed, true)
}

fn synthetic_data_impl(
    n: usize,
    d: usize,
    noise: f64,
    samples_per_agent: usize,
    seed: u64,
    classify: bool,
) -> Result<(Vec<AgentData>, DVector<f64>)> {
    if n == 0 || d == 0 || samples_per_agent == 0 {
        return Err(CoreError::InvalidParameter("counts must be positive".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(CoreError::InvalidParameter(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let signal = DVector::from_fn(d, |_, _| normal.sample(&mut rng));
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let mut draw = |count: usize| {
            (0..count)
                .map(|_| {
                    let z = DVector::from_fn(d, |_, _| normal.sample(&mut rng));
                    let eps: f64 = normal.sample(&mut rng);
                    let raw = z.dot(&signal) + noise * eps;
                    let label = if classify {
                        if raw >= 0.0 { 1.0 } else { -1.0 }
                    } else {
                        raw
                    };
                    Sample { z, label }
                })
                .collect::<Vec<_>>()
        };
        let train = draw(samples_per_agent);
        let val = draw(samples_per_agent);
        data.push(AgentData { train, val });
    }
    Ok((data, signal))
}

// ---------------------------------------------------------------------------
// CSV dataset I/O
// ---------------------------------------------------------------------------

/// Serializes per-agent data as CSV with header
/// `agent,split,f0,...,f{d-1},<label_col>`; one row per sample.
pub fn write_dataset_csv(data: &[AgentData], label_col: &str) -> Result<String> {
    let d = data
        .iter()
        .flat_map(|a| a.train.iter().chain(a.val.iter()))
        .next()
        .map(|s| s.z.len())
        .ok_or_else(|| CoreError::InvalidParameter("dataset is empty".into()))?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["agent".to_string(), "split".to_string()];
    header.extend((0..d).map(|j| format!("f{j}")));
    header.push(label_col.to_string());
    wtr.write_record(&header).map_err(|e| CoreError::Parse(e.to_string()))?;
    for (i, agent) in data.iter().enumerate() {
        for (split, samples) in [("train", &agent.train), ("val", &agent.val)] {
            for s in samples {
                let mut rec = vec![i.to_string(), split.to_string()];
                rec.extend(s.z.iter().map(|v| format!("{v}")));
                rec.push(format!("{}", s.label));
                wtr.write_record(&rec).map_err(|e| CoreError::Parse(e.to_string()))?;
            }
        }
    }
    let bytes = wtr.into_inner().map_err(|e| CoreError::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CoreError::Parse(e.to_string()))
}

/// Parses the CSV layout written by [`write_dataset_csv`]. The label column
/// is located by name; every other column except `agent` and `split` is a
/// feature, in header order. Agent ids must cover 0..n.
pub fn read_dataset_csv(text: &str, label_col: &str) -> Result<Vec<AgentData>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| CoreError::Parse(e.to_string()))?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let agent_idx = find("agent").ok_or_else(|| CoreError::Parse("missing 'agent' column".into()))?;
    let split_idx = find("split").ok_or_else(|| CoreError::Parse("missing 'split' column".into()))?;
    let label_idx = find(label_col)
        .ok_or_else(|| CoreError::Parse(format!("missing label column {label_col:?}")))?;
    let feature_idx: Vec<usize> = (0..headers.len())
        .filter(|&i| i != agent_idx && i != split_idx && i != label_idx)
        .collect();
    if feature_idx.is_empty() {
        return Err(CoreError::Parse("no feature columns".into()));
    }

    let mut data: Vec<AgentData> = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| CoreError::Parse(e.to_string()))?;
        let agent: usize = row[agent_idx]
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad agent id {:?}", &row[agent_idx])))?;
        if agent >= data.len() {
            data.resize_with(agent + 1, AgentData::default);
        }
        let z = DVector::from_iterator(
            feature_idx.len(),
            feature_idx.iter().map(|&i| row[i].parse::<f64>().unwrap_or(f64::NAN)),
        );
        if z.iter().any(|v| v.is_nan()) {
            return Err(CoreError::Parse(format!("non-numeric feature in row {row:?}")));
        }
        let label: f64 = row[label_idx]
            .parse()
            .map_err(|_| CoreError::Parse(format!("bad label {:?}", &row[label_idx])))?;
        let sample = Sample { z, label };
        match &row[split_idx] {
            "train" => data[agent].train.push(sample),
            "val" => data[agent].val.push(sample),
            other => return Err(CoreError::Parse(format!("unknown split {other:?}"))),
        }
    }
    if data.is_empty() {
        return Err(CoreError::Parse("dataset has no rows".into()));
    }
    Ok(data)
}

// ---------------------------------------------------------------------------
// Constants verification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ConstantCheck {
    pub name: String,
    pub declared: f64,
    pub worst_observed: f64,
    pub violated: bool,
}

/// Empirical report: for each declared constant, the worst value observed
/// over sampled points inside the certification ball. Report-only; violations
/// are flagged (observed > declared by more than 1e-8 relative) but nothing
/// throws.
#[derive(Debug, Clone)]
pub struct ConstantsReport {
    pub trials: usize,
    pub checks: Vec<ConstantCheck>,
}

impl ConstantsReport {
    pub fn all_ok(&self) -> bool {
        self.checks.iter().all(|c| !c.violated)
    }
}

impl fmt::Display for ConstantsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "constants check over {} sampled points:", self.trials)?;
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {}: declared {:.6e}, worst observed {:.6e}",
                if c.violated { "FAIL" } else { "ok" },
                c.name,
                c.declared,
                c.worst_observed
            )?;
        }
        Ok(())
    }
}

const REL_VIOLATION_TOL: f64 = 1e-8;

/// Samples point pairs inside the certification ball and checks every
/// declared constant: Lipschitz ratios (varying y at fixed x, and varying x
/// at fixed y for the maps whose declared modulus covers both directions),
/// gradient-norm bounds, and the Hessian eigenvalue window [mu_g, c_gyy].
pub fn verify_constants(p: &BilevelProblem, trials: usize, seed: u64) -> ConstantsReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = p.certification_radius();
    let k = p.constants().clone();

    let mut worst: Vec<(String, f64, f64)> = vec![
        ("l_g (grad_g_y Lipschitz in y)".into(), k.l_g, 0.0),
        ("l_fy (grad_f_y Lipschitz, either argument)".into(), k.l_fy, 0.0),
        ("l_fx (grad_f_x Lipschitz, either argument)".into(), k.l_fx, 0.0),
        ("l_gxy (jac_g_xy Lipschitz, either argument)".into(), k.l_gxy, 0.0),
        ("l_gyy (hess_g_yy Lipschitz, either argument)".into(), k.l_gyy, 0.0),
        ("c_fx (grad_f_x norm)".into(), k.c_fx, 0.0),
        ("c_fy (grad_f_y norm)".into(), k.c_fy, 0.0),
        ("c_gxy (jac_g_xy spectral norm)".into(), k.c_gxy, 0.0),
        ("c_gyy (hess_g_yy largest eigenvalue)".into(), k.c_gyy, 0.0),
    ];
    // mu_g is a lower bound; track the smallest observed eigenvalue instead.
    let mut min_eig_seen = f64::INFINITY;

    for _ in 0..trials {
        let i = rng.gen_range(0..p.n());
        let local = p.local(i);
        let x = sample_in_ball(&mut rng, p.d1(), radius);
        let x2 = sample_in_ball(&mut rng, p.d1(), radius);
        let y = sample_in_ball(&mut rng, p.d2(), radius);
        let y2 = sample_in_ball(&mut rng, p.d2(), radius);
        let dy = (&y2 - &y).norm();
        let dx = (&x2 - &x).norm();

        if dy > 1e-12 {
            let ratios = [
                (0, (local.grad_g_y(&x, &y2) - local.grad_g_y(&x, &y)).norm() / dy),
                (1, (local.grad_f_y(&x, &y2) - local.grad_f_y(&x, &y)).norm() / dy),
                (2, (local.grad_f_x(&x, &y2) - local.grad_f_x(&x, &y)).norm() / dy),
                (3, spectral_norm(&(local.jac_g_xy(&x, &y2) - local.jac_g_xy(&x, &y))) / dy),
                (4, spectral_norm(&(local.hess_g_yy(&x, &y2) - local.hess_g_yy(&x, &y))) / dy),
            ];
            for (slot, r) in ratios {
                worst[slot].2 = worst[slot].2.max(r);
            }
        }
        if dx > 1e-12 {
            // x-direction ratios; grad_g_y is excluded because its variation
            // in x is bounded through c_gxy, not through l_g
            let ratios = [
                (1, (local.grad_f_y(&x2, &y) - local.grad_f_y(&x, &y)).norm() / dx),
                (2, (local.grad_f_x(&x2, &y) - local.grad_f_x(&x, &y)).norm() / dx),
                (3, spectral_norm(&(local.jac_g_xy(&x2, &y) - local.jac_g_xy(&x, &y))) / dx),
                (4, spectral_norm(&(local.hess_g_yy(&x2, &y) - local.hess_g_yy(&x, &y))) / dx),
            ];
            for (slot, r) in ratios {
                worst[slot].2 = worst[slot].2.max(r);
            }
        }

        worst[5].2 = worst[5].2.max(local.grad_f_x(&x, &y).norm());
        worst[6].2 = worst[6].2.max(local.grad_f_y(&x, &y).norm());
        worst[7].2 = worst[7].2.max(spectral_norm(&local.jac_g_xy(&x, &y)));
        if let Ok((lo, hi)) = sym_eig_range(&local.hess_g_yy(&x, &y)) {
            worst[8].2 = worst[8].2.max(hi);
            min_eig_seen = min_eig_seen.min(lo);
        }
    }

    let mut checks: Vec<ConstantCheck> = worst
        .into_iter()
        .map(|(name, declared, observed)| ConstantCheck {
            name,
            declared,
            worst_observed: observed,
            violated: observed > declared * (1.0 + REL_VIOLATION_TOL) + 1e-300,
        })
        .collect();
    checks.push(ConstantCheck {
        name: "mu_g (hess_g_yy smallest eigenvalue)".into(),
        declared: k.mu_g,
        worst_observed: min_eig_seen,
        violated: min_eig_seen < k.mu_g - 1e-8,
    });

    ConstantsReport { trials, checks }
}

// ---------------------------------------------------------------------------
// Small linear-algebra helpers
// ---------------------------------------------------------------------------

/// Spectral norm (largest singular value) of a rectangular matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Extreme eigenvalues of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> Result<(f64, f64)> {
    let eig =
        SymmetricEigen::try_new(m.clone(), f64::EPSILON, 100_000).ok_or(CoreError::Eigensolver)?;
    Ok((eig.eigenvalues.min(), eig.eigenvalues.max()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(s)
    }

    #[test]
    fn quad_single_node_scalar_identity() {
        // A = [1], b = 0, c = 2, reg = 0: y*(x) = x, reduced optimum at x = 2.
        let p = quad_bilevel(
            vec![DMatrix::from_row_slice(1, 1, &[1.0])],
            vec![v(&[0.0])],
            vec![v(&[2.0])],
            0.0,
        )
        .unwrap();
        let cf = p.quad_closed_form().unwrap();
        assert_eq!(cf.y_star(&v(&[1.0])), v(&[1.0]));
        assert_eq!(p.local(0).f_val(&v(&[1.0]), &v(&[1.0])), 0.5);
        assert!(cf.pinv_path, "reg = 0 must take the minimum-norm path");
        let xs = cf.x_star();
        assert!((xs[0] - 2.0).abs() <= 1e-12, "x* = {xs}");
        assert!(cf.f_star().abs() <= 1e-12);
    }

    #[test]
    fn quad_two_node_symmetric_instance() {
        // A_i = I, b_i = 0, c_1 = -c_2: x* = 0 regardless of reg, f* = 0.5 ||c_1||^2.
        let eye = DMatrix::identity(2, 2);
        let c1 = v(&[1.0, 1.0]);
        let p = quad_bilevel(
            vec![eye.clone(), eye],
            vec![v(&[0.0, 0.0]), v(&[0.0, 0.0])],
            vec![c1.clone(), -c1.clone()],
            0.1,
        )
        .unwrap();
        let cf = p.quad_closed_form().unwrap();
        let xs = cf.x_star();
        assert!(xs.norm() <= 1e-12, "x* = {xs}");
        assert!((cf.f_star() - 0.5 * c1.norm_squared()).abs() <= 1e-12);
    }

    #[test]
    fn quad_constants_are_exact() {
        let p = quad_bilevel_random(4, 3, 2, 0.5, 11).unwrap();
        let k = p.constants();
        assert_eq!((k.mu_g, k.l_g, k.c_gyy), (1.0, 1.0, 1.0));
        assert_eq!(k.mu_f, Some(0.5));
        assert!(k.c_gxy > 0.0);
        let report = verify_constants(&p, 200, 5);
        assert!(report.all_ok(), "{report}");
    }

    #[test]
    fn logistic_loss_hand_values() {
        let s = Sample { z: v(&[2.0, -1.0]), label: 1.0 };
        let y0 = v(&[0.0, 0.0]);
        assert!((loss_value(Loss::Logistic, &y0, &s) - 2.0_f64.ln()).abs() <= 1e-15);
        let g = loss_grad(Loss::Logistic, &y0, &s);
        assert!((g - (-0.5) * &s.z).norm() <= 1e-15, "gradient at 0 is -b z / 2");
    }

    #[test]
    fn linear_loss_hand_values() {
        let s = Sample { z: v(&[1.0, 2.0]), label: 3.0 };
        let y = v(&[1.0, 1.0]);
        // r = 1 + 2 - 3 = 0
        assert_eq!(loss_value(Loss::Linear, &y, &s), 0.0);
        let y2 = v(&[2.0, 1.0]);
        // r = 2 + 2 - 3 = 1
        assert_eq!(loss_value(Loss::Linear, &y2, &s), 1.0);
        assert_eq!(loss_grad(Loss::Linear, &y2, &s), 2.0 * &s.z);
    }

    #[test]
    fn softmax_three_class_at_zero_is_ln3() {
        let classes = 3;
        let s = Sample { z: v(&[0.5, -0.25]), label: 2.0 };
        let y0 = DVector::zeros(classes * 3);
        let val = loss_value(Loss::Softmax { classes }, &y0, &s);
        assert!((val - 3.0_f64.ln()).abs() <= 1e-14, "got {val}");
    }

    #[test]
    fn smoothed_svm_is_continuous_at_the_margin() {
        let s = Sample { z: v(&[1.0]), label: 1.0 };
        let eps = 1e-9;
        let inside = v(&[1.0 - eps]); // t = eps > 0
        let outside = v(&[1.0 + eps]); // t = -eps < 0
        let vi = loss_value(Loss::SmoothedSvm, &inside, &s);
        let vo = loss_value(Loss::SmoothedSvm, &outside, &s);
        assert!(vi.abs() <= 1e-17 && vo == 0.0, "value continuous at the margin");
        let gi = loss_grad(Loss::SmoothedSvm, &inside, &s);
        let go = loss_grad(Loss::SmoothedSvm, &outside, &s);
        assert!(gi.norm() <= 3e-9 && go.norm() == 0.0, "gradient continuous at the margin");
    }

    #[test]
    fn ho_rejects_bad_labels() {
        let data = vec![AgentData {
            train: vec![Sample { z: v(&[1.0]), label: 0.5 }],
            val: vec![],
        }];
        assert!(ho_problem(Loss::Logistic, data.clone()).is_err());
        assert!(ho_problem(Loss::Softmax { classes: 2 }, data).is_err());
    }

    #[test]
    fn ho_regularizer_couples_through_exp() {
        let data = vec![AgentData {
            train: vec![Sample { z: v(&[1.0, 0.0]), label: 1.0 }],
            val: vec![Sample { z: v(&[0.0, 1.0]), label: 0.5 }],
        }];
        let p = ho_problem(Loss::Linear, data).unwrap();
        let x = v(&[0.1, -0.3]);
        let y = v(&[0.4, 0.2]);
        let local = p.local(0);
        // g = (y0 - 1)^2 + y . exp(x)
        let expected = (0.4_f64 - 1.0).powi(2) + 0.4 * 0.1_f64.exp() + 0.2 * (-0.3_f64).exp();
        assert!((local.g_val(&x, &y) - expected).abs() <= 1e-15);
        let jac = local.jac_g_xy(&x, &y);
        assert_eq!(jac[(0, 0)], 0.1_f64.exp());
        assert_eq!(jac[(1, 1)], (-0.3_f64).exp());
        assert_eq!(jac[(0, 1)], 0.0);
        // f ignores x entirely
        assert_eq!(local.grad_f_x(&x, &y), DVector::zeros(2));
    }

    #[test]
    fn softmax_dimensions_follow_class_count() {
        let data = vec![AgentData {
            train: vec![Sample { z: v(&[1.0, 2.0]), label: 0.0 }],
            val: vec![Sample { z: v(&[0.5, 1.0]), label: 2.0 }],
        }];
        let p = ho_problem(Loss::Softmax { classes: 3 }, data).unwrap();
        assert_eq!(p.d1(), 9);
        assert_eq!(p.d2(), 9);
        assert_eq!(p.constants().mu_g, 0.0, "softmax cross-entropy is shift invariant");
    }

    #[test]
    fn synthetic_data_is_deterministic_and_noiseless_is_linear() {
        let (a, sig_a) = synthetic_regression_data(3, 2, 0.25, 4, 99).unwrap();
        let (b, sig_b) = synthetic_regression_data(3, 2, 0.25, 4, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(sig_a, sig_b);

        let (data, signal) = synthetic_regression_data(5, 3, 0.0, 6, 7).unwrap();
        for agent in &data {
            for s in agent.train.iter().chain(agent.val.iter()) {
                assert!((s.z.dot(&signal) - s.label).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn noiseless_least_squares_recovers_signal() {
        let (data, signal) = synthetic_regression_data(4, 3, 0.0, 8, 21).unwrap();
        let mut gram = DMatrix::zeros(3, 3);
        let mut rhs = DVector::zeros(3);
        for agent in &data {
            for s in &agent.train {
                gram += &s.z * s.z.transpose();
                rhs += &s.z * s.label;
            }
        }
        let fit = gram.cholesky().unwrap().solve(&rhs);
        assert!((fit - signal).norm() <= 1e-10);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let (data, _) = synthetic_regression_data(3, 2, 0.1, 2, 5).unwrap();
        let text = write_dataset_csv(&data, "target").unwrap();
        assert!(text.starts_with("agent,split,f0,f1,target"));
        let back = read_dataset_csv(&text, "target").unwrap();
        assert_eq!(back.len(), data.len());
        for (orig, parsed) in data.iter().zip(&back) {
            assert_eq!(orig.train.len(), parsed.train.len());
            assert_eq!(orig.val.len(), parsed.val.len());
            for (a, b) in orig.train.iter().zip(&parsed.train) {
                assert!((a.label - b.label).abs() <= 1e-12);
                assert!((&a.z - &b.z).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn csv_reader_rejects_missing_label_column() {
        let (data, _) = synthetic_regression_data(2, 2, 0.1, 2, 5).unwrap();
        let text = write_dataset_csv(&data, "target").unwrap();
        assert!(read_dataset_csv(&text, "label").is_err());
    }

    #[test]
    fn ho_constants_hold_empirically_for_linear_and_logistic() {
        let (data, _) = synthetic_regression_data(3, 2, 0.2, 5, 17).unwrap();
        let p = ho_problem(Loss::Linear, data).unwrap();
        let report = verify_constants(&p, 300, 23);
        assert!(report.all_ok(), "{report}");

        let (cdata, _) = synthetic_classification_data(3, 2, 0.2, 5, 19).unwrap();
        let p = ho_problem(Loss::Logistic, cdata).unwrap();
        let report = verify_constants(&p, 300, 29);
        assert!(report.all_ok(), "{report}");
    }
}
