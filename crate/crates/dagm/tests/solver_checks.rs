//! Solver-level checks: a dense single-node reference, consensus-error
//! scaling in the outer step size, counter arithmetic, and schedule clipping.

mod common;

use common::*;
use dagm::solver::{dagm_run, schedule_params, RunConfig, Schedule};
use dagm::theory::{beta_cap, counter_prediction};
use dagm_core::graph::{Graph, MixingMatrix};
use dagm_core::problem::quad_bilevel_random;
use nalgebra::DVector;
use rand::Rng;

/// Replays the alternating scheme for one node with dense linear algebra:
/// no network terms, the series solve collapses to a single diagonal-block
/// inverse, and every step is a plain matrix operation.
#[test]
fn single_node_run_matches_a_dense_reference() {
    let p = quad_bilevel_random(1, 2, 2, 0.8, 3).unwrap();
    let g = Graph::path(1);
    let w = MixingMatrix::metropolis(&g);
    let (alpha, beta, m, k) = (0.1, 0.4, 7usize, 15usize);

    let cfg = RunConfig { alpha, beta, u: 3, m, k, seed: 0, schedule: Schedule::Fixed };
    let traj = dagm_run(&p, &w, &cfg).unwrap();

    let local = p.local(0);
    let mut x = DVector::zeros(p.d1());
    let mut y = DVector::zeros(p.d2());
    for _ in 0..k {
        for _ in 0..m {
            y -= beta * local.grad_g_y(&x, &y);
        }
        let hess = local.hess_g_yy(&x, &y) * beta;
        let h = -hess.lu().solve(&local.grad_f_y(&x, &y)).unwrap();
        let d = local.grad_f_x(&x, &y) + beta * (local.jac_g_xy(&x, &y) * &h);
        x -= alpha * d;
    }

    let fin = traj.final_state();
    assert!(
        (&fin.x[0] - &x).norm() <= 1e-10 * (1.0 + x.norm()),
        "outer iterate diverges from the dense replay: {:e}",
        (&fin.x[0] - &x).norm()
    );
    assert!(
        (&fin.y[0] - &y).norm() <= 1e-10 * (1.0 + y.norm()),
        "inner iterate diverges from the dense replay: {:e}",
        (&fin.y[0] - &y).norm()
    );
}

/// At stationarity the penalized optimum satisfies (I - W) x = -alpha * sum
/// of local gradients, so the residual consensus error is proportional to
/// alpha. Dividing consecutive alphas by 10 should shrink the plateau by
/// roughly 10x.
#[test]
fn consensus_error_scales_linearly_with_alpha() {
    let g = Graph::path(6);
    let w = MixingMatrix::metropolis(&g);
    let p = quad_bilevel_random(6, 2, 2, 0.5, 17).unwrap();

    let mut plateaus = Vec::new();
    for alpha in [1e-1, 1e-2, 1e-3] {
        let cfg = RunConfig {
            alpha,
            beta: 0.3,
            u: 8,
            m: 10,
            k: 1200,
            seed: 0,
            schedule: Schedule::Fixed,
        };
        let traj = dagm_run(&p, &w, &cfg).unwrap();
        plateaus.push(traj.final_state().consensus_error_x());
    }
    for pair in plateaus.windows(2) {
        let ratio = pair[0] / pair[1];
        assert!(
            (3.0..30.0).contains(&ratio),
            "consensus plateau should scale ~linearly in alpha; got plateaus {plateaus:?}"
        );
    }
}

#[test]
fn counters_match_the_closed_form_on_random_configurations() {
    let mut r = rng(42);
    for case in 0..25 {
        let n = r.gen_range(2..=6usize);
        let d1 = r.gen_range(1..=3usize);
        let d2 = r.gen_range(1..=3usize);
        let k = r.gen_range(0..=5usize);
        let u = r.gen_range(0..=4usize);
        let m = r.gen_range(1..=4usize);
        let seed = r.gen_range(0..1000u64);

        let g = Graph::random_connected(n, 0.6, seed).unwrap();
        let w = MixingMatrix::metropolis(&g);
        let p = quad_bilevel_random(n, d1, d2, 0.5, seed).unwrap();
        let cfg = RunConfig {
            alpha: 1e-3,
            beta: 0.2,
            u,
            m,
            k,
            seed,
            schedule: Schedule::Fixed,
        };
        let traj = dagm_run(&p, &w, &cfg).unwrap();

        let total_degree: u64 = (0..n).map(|i| g.degree(i) as u64).sum();
        let scalars = traj.total_msgs_d1() * d1 as u64 + traj.total_msgs_d2() * d2 as u64;
        assert_eq!(
            scalars % total_degree,
            0,
            "volume must be a whole number of neighbor exchanges (case {case})"
        );
        assert_eq!(
            scalars / total_degree,
            counter_prediction(k as u64, u as u64, m as u64, d1 as u64, d2 as u64),
            "counter mismatch at case {case}: n={n} d1={d1} d2={d2} k={k} u={u} m={m}"
        );
    }
}

#[test]
fn theorem_schedule_clips_user_values_to_the_caps() {
    let g = Graph::complete(4);
    let w = MixingMatrix::metropolis(&g);
    let p = quad_bilevel_random(4, 2, 2, 0.5, 5).unwrap();
    let cap = beta_cap(p.constants(), &w).unwrap();

    let plan = schedule_params(
        p.constants(),
        &w,
        100,
        Schedule::TheoremStronglyConvex,
        10.0,
        10.0,
        3,
    )
    .unwrap();
    assert!(
        (plan.beta - cap.beta_bar).abs() <= 1e-15,
        "beta should clip to the cap: {} vs {}",
        plan.beta,
        cap.beta_bar
    );
    assert!(plan.alpha < 10.0, "alpha should clip to the smoothness cap");
    assert!(
        plan.notes.iter().any(|n| n.contains("clipped")),
        "clipping must be reported in the notes: {:?}",
        plan.notes
    );
    assert!(plan.m >= 100, "strongly convex inner rounds grow at least like k");
}
