//! Shared helpers for the integration suites.
#![allow(dead_code)]

use dagm::theory::beta_cap;
use dagm_core::graph::{Graph, MixingMatrix};
use dagm_core::problem::{quad_bilevel_random, BilevelProblem, ProblemConstants};
use dagm_core::stacked::StackedState;
use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_blocks(r: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<DVector<f64>> {
    (0..n).map(|_| DVector::from_fn(d, |_, _| r.gen_range(-scale..scale))).collect()
}

pub fn random_state(r: &mut ChaCha8Rng, n: usize, d1: usize, d2: usize) -> StackedState {
    StackedState::new(random_blocks(r, n, d1, 1.0), random_blocks(r, n, d2, 1.0)).unwrap()
}

/// A penalty parameter strictly inside both the contraction region
/// (series factor rho < 1 needs beta mu_g > 2 (Theta - theta)) and the
/// step cap beta_bar; None when the self-weight spread leaves no room.
pub fn contraction_beta(c: &ProblemConstants, w: &MixingMatrix) -> Option<f64> {
    let cap = beta_cap(c, w).ok()?;
    let threshold = 2.0 * (w.big_theta() - w.theta()) / c.mu_g;
    if threshold >= cap.beta_bar {
        return None;
    }
    Some(0.5 * (threshold + cap.beta_bar))
}

/// Random connected graph + Metropolis weights + random quadratic instance,
/// all derived from one seed.
pub fn random_quad_instance(
    seed: u64,
    n: usize,
    d1: usize,
    d2: usize,
) -> (BilevelProblem, Graph, MixingMatrix) {
    let g = Graph::random_connected(n, 0.5, seed).unwrap();
    let w = MixingMatrix::metropolis(&g);
    let p = quad_bilevel_random(n, d1, d2, 0.5, seed).unwrap();
    (p, g, w)
}

pub fn stacked_distance(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).norm_squared()).sum::<f64>().sqrt()
}

pub fn stacked_norm_of(a: &[DVector<f64>]) -> f64 {
    a.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt()
}
