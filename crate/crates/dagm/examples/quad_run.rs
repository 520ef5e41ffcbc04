//! Minimal library-level run: random quadratic instance on a random
//! connected graph, fixed parameters, final consensus error printed.

use dagm::solver::{dagm_run, RunConfig, Schedule};
use dagm_core::graph::{Graph, MixingMatrix};
use dagm_core::problem::quad_bilevel_random;

fn main() -> Result<(), dagm::DagmError> {
    let g = Graph::random_connected(6, 0.5, 7)?;
    let w = MixingMatrix::metropolis(&g);
    let p = quad_bilevel_random(6, 2, 2, 0.5, 7)?;
    let cfg = RunConfig {
        alpha: 0.05, beta: 0.75, u: 8, m: 10, k: 200, seed: 7,
        schedule: Schedule::Fixed,
    };
    let traj = dagm_run(&p, &w, &cfg)?;
    let last = traj.snapshots.last().expect("run always records k = 0");
    println!("final consensus error: {}", last.consensus_err_x);
    Ok(())
}
