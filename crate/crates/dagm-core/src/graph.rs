//! Communication graphs and doubly stochastic mixing matrices.
//!
//! A mixing matrix W must be symmetric, nonnegative, doubly stochastic,
//! supported on the graph's edges (plus the diagonal), have a simple
//! eigenvalue at 1, and keep its self-weights strictly inside (0, 1).
//! The spectral gap parameter is sigma = ||W - (1/n) 11^T||_2, i.e. the
//! largest eigenvalue magnitude once the consensus eigenvalue is removed.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::fmt;

use crate::{CoreError, Result};

/// Row/column sums of a mixing matrix must match 1 within this tolerance.
pub const STOCHASTIC_SUM_TOL: f64 = 1e-12;
/// The eigenvalue at 1 is considered simple when the next eigenvalue is
/// below 1 minus this tolerance.
pub const SIMPLE_EIGENVALUE_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// Undirected simple connected graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from an edge list. Self-loops and out-of-range
    /// endpoints are rejected, duplicate edges are collapsed, and the
    /// resulting graph must be connected.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Graph> {
        if n == 0 {
            return Err(CoreError::InvalidParameter("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a == b {
                return Err(CoreError::InvalidParameter(format!("self-loop at node {a}")));
            }
            if a >= n || b >= n {
                return Err(CoreError::InvalidParameter(format!(
                    "edge ({a}, {b}) out of range for n = {n}"
                )));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in &set {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        let g = Graph { n, edges: set.into_iter().collect(), neighbors };
        if !g.is_connected() {
            return Err(CoreError::Disconnected);
        }
        Ok(g)
    }

    /// Path graph 0 - 1 - ... - (n-1).
    pub fn path(n: usize) -> Graph {
        Graph::new(n, (1..n).map(|i| (i - 1, i))).expect("path graph is connected")
    }

    /// Complete graph on n nodes.
    pub fn complete(n: usize) -> Graph {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Graph::new(n, edges).expect("complete graph is connected")
    }

    /// Star graph with node 0 as the hub.
    pub fn star(n: usize) -> Graph {
        Graph::new(n, (1..n).map(|i| (0, i))).expect("star graph is connected")
    }

    /// Random connected graph: a uniformly attached spanning tree plus each
    /// remaining pair independently with probability `r`. Deterministic for
    /// a fixed `(n, r, seed)` triple.
    pub fn random_connected(n: usize, r: f64, seed: u64) -> Result<Graph> {
        if n == 0 {
            return Err(CoreError::InvalidParameter("graph needs at least one node".into()));
        }
        if !(r > 0.0 && r <= 1.0) {
            return Err(CoreError::InvalidParameter(format!(
                "connectivity ratio must lie in (0, 1], got {r}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = BTreeSet::new();
        for v in 1..n {
            let u = rng.gen_range(0..v);
            set.insert((u, v));
        }
        for i in 0..n {
            for j in i + 1..n {
                if !set.contains(&(i, j)) && rng.gen::<f64>() < r {
                    set.insert((i, j));
                }
            }
        }
        Graph::new(n, set)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edges as ordered pairs (i, j) with i < j.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    /// Sum of all degrees, i.e. twice the edge count. This is the number of
    /// directed point-to-point messages one full neighborhood exchange costs.
    pub fn total_degree(&self) -> usize {
        2 * self.edges.len()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let key = (a.min(b), a.max(b));
        self.edges.binary_search(&key).is_ok()
    }

    fn is_connected(&self) -> bool {
        let mut seen = vec![false; self.n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    count += 1;
                    stack.push(u);
                }
            }
        }
        count == self.n
    }

    /// Text form: first line is the node count, then one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for &(a, b) in &self.edges {
            out.push_str(&format!("{a} {b}\n"));
        }
        out
    }

    /// Parses the text form produced by [`Graph::to_edge_list`].
    pub fn from_edge_list(text: &str) -> Result<Graph> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let n: usize = lines
            .next()
            .ok_or_else(|| CoreError::Parse("empty edge list".into()))?
            .trim()
            .parse()
            .map_err(|_| CoreError::Parse("first line must be the node count".into()))?;
        let mut edges = Vec::new();
        for line in lines {
            let mut parts = line.split_whitespace();
            let a: usize = parts
                .next()
                .ok_or_else(|| CoreError::Parse(format!("bad edge line: {line:?}")))?
                .parse()
                .map_err(|_| CoreError::Parse(format!("bad edge line: {line:?}")))?;
            let b: usize = parts
                .next()
                .ok_or_else(|| CoreError::Parse(format!("bad edge line: {line:?}")))?
                .parse()
                .map_err(|_| CoreError::Parse(format!("bad edge line: {line:?}")))?;
            if parts.next().is_some() {
                return Err(CoreError::Parse(format!("bad edge line: {line:?}")));
            }
            edges.push((a, b));
        }
        Graph::new(n, edges)
    }
}

// ---------------------------------------------------------------------------
// MixingMatrix
// ---------------------------------------------------------------------------

/// Dense symmetric mixing matrix together with the adjacency it lives on and
/// its self-weight extremes `theta = min_i w_ii`, `big_theta = max_i w_ii`.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    neighbors: Vec<Vec<usize>>,
    theta: f64,
    big_theta: f64,
}

/// Extreme eigenvalues of I - W. `lambda_hat_min` is the smallest eigenvalue
/// after removing the consensus null direction; it is `None` when n = 1.
#[derive(Debug, Clone, Copy)]
pub struct IMinusWEigs {
    pub lambda_hat_min: Option<f64>,
    pub lambda_max: f64,
}

impl MixingMatrix {
    /// Metropolis weights: w_ij = 1 / (1 + max(deg_i, deg_j)) on edges and
    /// w_ii = 1 - sum of the incident off-diagonal weights. Symmetry is exact
    /// because each off-diagonal entry is computed once and mirrored.
    pub fn metropolis(g: &Graph) -> MixingMatrix {
        let n = g.n();
        let mut w = DMatrix::zeros(n, n);
        for &(a, b) in g.edges() {
            let v = 1.0 / (1.0 + g.degree(a).max(g.degree(b)) as f64);
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        for i in 0..n {
            let off: f64 = g.neighbors(i).iter().map(|&j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::from_parts(w, g)
    }

    /// Max-degree weights: w_ij = 1/n on edges, w_ii = 1 - deg(i)/n.
    /// Requires n > 2; for n <= 2 the self-weight bounds degenerate and the
    /// construction is rejected.
    pub fn max_degree(g: &Graph) -> Result<MixingMatrix> {
        let n = g.n();
        if n <= 2 {
            return Err(CoreError::InvalidParameter(format!(
                "max-degree weights need n > 2 so that self-weights stay in (0, 1); got n = {n}"
            )));
        }
        let mut w = DMatrix::zeros(n, n);
        let v = 1.0 / n as f64;
        for &(a, b) in g.edges() {
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        for i in 0..n {
            w[(i, i)] = 1.0 - g.degree(i) as f64 / n as f64;
        }
        Ok(Self::from_parts(w, g))
    }

    /// Wraps an arbitrary square matrix for validation or experimentation.
    /// No mixing-matrix invariant is enforced here; run [`MixingMatrix::validate`]
    /// to obtain the full report.
    pub fn from_dense(w: DMatrix<f64>, g: &Graph) -> Result<MixingMatrix> {
        if w.nrows() != g.n() || w.ncols() != g.n() {
            return Err(CoreError::DimensionMismatch(format!(
                "matrix is {}x{} but the graph has {} nodes",
                w.nrows(),
                w.ncols(),
                g.n()
            )));
        }
        Ok(Self::from_parts(w, g))
    }

    fn from_parts(w: DMatrix<f64>, g: &Graph) -> MixingMatrix {
        let diag: Vec<f64> = (0..g.n()).map(|i| w[(i, i)]).collect();
        let theta = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let big_theta = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        MixingMatrix {
            w,
            neighbors: (0..g.n()).map(|i| g.neighbors(i).to_vec()).collect(),
            theta,
            big_theta,
        }
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    pub fn self_weight(&self, i: usize) -> f64 {
        self.w[(i, i)]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn total_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Smallest self-weight, the theta of the self-weight bounds.
    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Largest self-weight, the capital Theta of the self-weight bounds.
    pub fn big_theta(&self) -> f64 {
        self.big_theta
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let eig = SymmetricEigen::try_new(self.w.clone(), f64::EPSILON, 100_000)
            .ok_or(CoreError::Eigensolver)?;
        let mut vals: Vec<f64> = eig.eigenvalues.iter().cloned().collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(vals)
    }

    /// sigma = ||W - (1/n) 11^T||_2: the largest eigenvalue magnitude after
    /// removing one copy of the top (consensus) eigenvalue. Returns 0 for n = 1.
    pub fn spectral_gap_sigma(&self) -> Result<f64> {
        let vals = self.eigenvalues()?;
        let n = vals.len();
        if n == 1 {
            return Ok(0.0);
        }
        // vals is ascending; vals[n-1] is the consensus eigenvalue (~1).
        let sigma = vals[..n - 1]
            .iter()
            .map(|v| v.abs())
            .fold(0.0_f64, f64::max);
        Ok(sigma)
    }

    /// Extreme eigenvalues of I - W, with the smallest eigenvalue treated as
    /// the consensus null direction and skipped for `lambda_hat_min`.
    pub fn i_minus_w_eigs(&self) -> Result<IMinusWEigs> {
        let vals = self.eigenvalues()?;
        let n = vals.len();
        let lambda_max = 1.0 - vals[0];
        let lambda_hat_min = if n >= 2 { Some(1.0 - vals[n - 2]) } else { None };
        Ok(IMinusWEigs { lambda_hat_min, lambda_max })
    }

    /// Checks the mixing-matrix assumptions against `g` and reports every
    /// violation without throwing: symmetry, nonnegativity, sparsity support,
    /// row/column sums, simple eigenvalue at 1, and self-weight bounds.
    pub fn validate(&self, g: &Graph) -> ValidationReport {
        let n = self.n();
        let mut checks = Vec::new();

        let mut report = |name: &str, passed: bool, detail: String| {
            checks.push(Check { name: name.to_string(), passed, detail });
        };

        if n != g.n() {
            report(
                "dimensions",
                false,
                format!("matrix is {n}x{n} but the graph has {} nodes", g.n()),
            );
            return ValidationReport { checks };
        }

        let mut asym = None;
        'sym: for i in 0..n {
            for j in i + 1..n {
                if self.w[(i, j)].to_bits() != self.w[(j, i)].to_bits() {
                    asym = Some((i, j));
                    break 'sym;
                }
            }
        }
        report(
            "symmetry",
            asym.is_none(),
            match asym {
                None => "W is bit-exact symmetric".into(),
                Some((i, j)) => format!("w[{i}][{j}] != w[{j}][{i}]"),
            },
        );

        let min_entry = self.w.iter().cloned().fold(f64::INFINITY, f64::min);
        report(
            "nonnegativity",
            min_entry >= 0.0,
            format!("smallest entry {min_entry:e}"),
        );

        let mut off_support = true;
        let mut bad_pair = (0, 0);
        for i in 0..n {
            for j in 0..n {
                if i != j && self.w[(i, j)] != 0.0 && !g.has_edge(i, j) {
                    off_support = false;
                    bad_pair = (i, j);
                }
            }
        }
        report(
            "sparsity (A1)",
            off_support,
            if off_support {
                "all off-diagonal mass sits on graph edges".into()
            } else {
                format!("nonzero weight on non-edge ({}, {})", bad_pair.0, bad_pair.1)
            },
        );

        let mut worst_row = 0.0_f64;
        let mut worst_col = 0.0_f64;
        for i in 0..n {
            let row: f64 = (0..n).map(|j| self.w[(i, j)]).sum();
            let col: f64 = (0..n).map(|j| self.w[(j, i)]).sum();
            worst_row = worst_row.max((row - 1.0).abs());
            worst_col = worst_col.max((col - 1.0).abs());
        }
        report(
            "row sums (A2)",
            worst_row <= STOCHASTIC_SUM_TOL,
            format!("worst |row sum - 1| = {worst_row:e}"),
        );
        report(
            "column sums (A2)",
            worst_col <= STOCHASTIC_SUM_TOL,
            format!("worst |col sum - 1| = {worst_col:e}"),
        );

        match self.eigenvalues() {
            Ok(vals) => {
                if n >= 2 {
                    let lambda2 = vals[n - 2];
                    report(
                        "simple eigenvalue at 1 (A3)",
                        lambda2 < 1.0 - SIMPLE_EIGENVALUE_TOL,
                        format!("second-largest eigenvalue {lambda2}"),
                    );
                } else {
                    report("simple eigenvalue at 1 (A3)", true, "n = 1 is trivially simple".into());
                }
            }
            Err(_) => report("simple eigenvalue at 1 (A3)", false, "eigensolver failed".into()),
        }

        let a4 = self.theta > 0.0 && self.big_theta < 1.0 && self.theta <= self.big_theta;
        report(
            "self-weight bounds (A4)",
            a4,
            format!("theta = {}, Theta = {}", self.theta, self.big_theta),
        );

        ValidationReport { checks }
    }

    /// One CSV row per matrix row, entries comma separated.
    pub fn to_csv(&self) -> String {
        let n = self.n();
        let mut out = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| format!("{}", self.w[(i, j)])).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Validation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of [`MixingMatrix::validate`]; collects every check so callers can
/// print the full picture instead of stopping at the first failure.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "  [{}] {}: {}",
                if c.passed { "ok" } else { "FAIL" },
                c.name,
                c.detail
            )?;
        }
        Ok(())
    }
}
