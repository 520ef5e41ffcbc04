//! Experiment runner: TOML-configured replicated solver runs with
//! deterministic artifacts (trajectory JSONL, metrics CSV, manifest JSON),
//! plus the validate / complexity / sweep commands the CLI exposes.
//!
//! Artifact rule: metric files carry no wall-clock data and no absolute
//! paths, so re-running a configuration with the same seed reproduces them
//! byte for byte.

use crate::diagnostics::{penalty_gap, penalty_gap_slope, stationarity, StationarityMode};
use crate::solver::{dagm_run, RunConfig, Schedule, Trajectory};
use crate::theory::{complexity_table, counter_prediction, theory_constants};
use crate::{DagmError, Result};
use dagm_core::graph::{Graph, MixingMatrix};
use dagm_core::problem::{
    ho_problem, quad_bilevel_random, read_dataset_csv, synthetic_classification_data,
    synthetic_regression_data, verify_constants, AgentData, BilevelProblem, Loss,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Environment variable prepended to relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "DAGM_OUTPUT_ROOT";

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Loss selector for the hyperparameter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Linear,
    Logistic,
    SmoothedSvm,
    Softmax,
}

/// Problem section: either the synthetic quadratic family or the
/// hyperparameter family (synthetic data or a CSV dataset).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quad {
        d1: usize,
        d2: usize,
        #[serde(default = "default_reg")]
        reg: f64,
    },
    Ho {
        loss: LossName,
        /// Class count, softmax only.
        #[serde(default)]
        classes: Option<usize>,
        /// CSV dataset path; when absent, synthetic data is generated.
        #[serde(default)]
        dataset: Option<PathBuf>,
        #[serde(default = "default_label_col")]
        label_col: String,
        /// Synthetic feature dimension.
        #[serde(default)]
        features: Option<usize>,
        /// Synthetic response noise level.
        #[serde(default)]
        noise: Option<f64>,
        #[serde(default)]
        samples_per_agent: Option<usize>,
    },
}

fn default_reg() -> f64 {
    0.5
}

fn default_label_col() -> String {
    "label".into()
}

/// Weight scheme for the mixing matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    #[default]
    Metropolis,
    MaxDegree,
}

/// Graph section: explicit inline edges, an edge-list file (first line is
/// the node count), or a random connected graph with link probability `r`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub r: Option<f64>,
    #[serde(default)]
    pub edges: Option<Vec<[usize; 2]>>,
    #[serde(default)]
    pub edge_file: Option<PathBuf>,
    #[serde(default)]
    pub weights: WeightScheme,
}

/// Run section: solver parameters plus replicate count. Outer length comes
/// from `k` directly or from `epochs * iterations_per_epoch` (one epoch maps
/// to one outer iteration by default).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub u: usize,
    #[serde(default = "one")]
    pub m: usize,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default = "one")]
    pub iterations_per_epoch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "one")]
    pub replicates: usize,
}

fn one() -> usize {
    1
}

/// Which per-iterate metric series the run writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricsMode {
    StronglyConvex,
    Convex,
    Nonconvex,
    /// Training cost and validation MSE (hyperparameter family only).
    Ho,
    #[default]
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub metrics: MetricsMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemConfig,
    pub graph: GraphConfig,
    pub run: RunSection,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Command-line overrides; file values give way to set fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub u: Option<usize>,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub seed: Option<u64>,
    pub replicates: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub metrics: Option<MetricsMode>,
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    toml::from_str(text).map_err(|e| DagmError::Config(format!("config parse error: {e}")))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| DagmError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, over: &Overrides) {
    if let Some(v) = over.alpha {
        cfg.run.alpha = v;
    }
    if let Some(v) = over.beta {
        cfg.run.beta = v;
    }
    if let Some(v) = over.u {
        cfg.run.u = v;
    }
    if let Some(v) = over.m {
        cfg.run.m = v;
    }
    if let Some(v) = over.k {
        cfg.run.k = Some(v);
    }
    if let Some(v) = over.seed {
        cfg.run.seed = v;
    }
    if let Some(v) = over.replicates {
        cfg.run.replicates = v;
    }
    if let Some(v) = &over.output_dir {
        cfg.output.dir = Some(v.clone());
    }
    if let Some(v) = over.metrics {
        cfg.output.metrics = v;
    }
}

// ---------------------------------------------------------------------------
// Instance construction
// ---------------------------------------------------------------------------

fn resolved_k(run: &RunSection) -> Result<usize> {
    match (run.k, run.epochs) {
        (Some(k), _) => Ok(k),
        (None, Some(e)) => {
            if run.iterations_per_epoch == 0 {
                return Err(DagmError::Config("iterations_per_epoch must be >= 1".into()));
            }
            Ok(e * run.iterations_per_epoch)
        }
        (None, None) => Err(DagmError::Config("run section needs k or epochs".into())),
    }
}

fn graph_n(cfg: &GraphConfig) -> Result<Option<usize>> {
    Ok(cfg.n)
}

/// Builds the communication graph for one replicate.
pub fn build_graph(cfg: &GraphConfig, seed: u64) -> Result<Graph> {
    if let Some(edges) = &cfg.edges {
        let n = graph_n(cfg)?
            .ok_or_else(|| DagmError::Config("inline edges need graph.n".into()))?;
        return Ok(Graph::new(n, edges.iter().map(|e| (e[0], e[1])))?);
    }
    if let Some(path) = &cfg.edge_file {
        let text = fs::read_to_string(path)
            .map_err(|e| DagmError::Config(format!("cannot read {}: {e}", path.display())))?;
        let g = Graph::from_edge_list(&text)?;
        if let Some(n) = cfg.n {
            if n != g.n() {
                return Err(DagmError::Config(format!(
                    "graph.n = {n} disagrees with edge file node count {}",
                    g.n()
                )));
            }
        }
        return Ok(g);
    }
    let n = cfg.n.ok_or_else(|| DagmError::Config("graph section needs n".into()))?;
    let r = cfg.r.ok_or_else(|| {
        DagmError::Config("graph section needs r (or an edge list) for random graphs".into())
    })?;
    Ok(Graph::random_connected(n, r, seed)?)
}

pub fn build_mixing(cfg: &GraphConfig, g: &Graph) -> Result<MixingMatrix> {
    match cfg.weights {
        WeightScheme::Metropolis => Ok(MixingMatrix::metropolis(g)),
        WeightScheme::MaxDegree => Ok(MixingMatrix::max_degree(g)?),
    }
}

fn to_loss(name: LossName, classes: Option<usize>) -> Result<Loss> {
    match name {
        LossName::Linear => Ok(Loss::Linear),
        LossName::Logistic => Ok(Loss::Logistic),
        LossName::SmoothedSvm => Ok(Loss::SmoothedSvm),
        LossName::Softmax => {
            let classes = classes
                .ok_or_else(|| DagmError::Config("softmax needs problem.classes".into()))?;
            Ok(Loss::Softmax { classes })
        }
    }
}

fn synthetic_agents(
    loss: Loss,
    n: usize,
    features: usize,
    noise: f64,
    samples_per_agent: usize,
    seed: u64,
) -> Result<Vec<AgentData>> {
    match loss {
        Loss::Linear => {
            Ok(synthetic_regression_data(n, features, noise, samples_per_agent, seed)?.0)
        }
        Loss::Logistic | Loss::SmoothedSvm => {
            Ok(synthetic_classification_data(n, features, noise, samples_per_agent, seed)?.0)
        }
        Loss::Softmax { classes } => {
            if classes != 2 {
                return Err(DagmError::Config(
                    "synthetic data only supports softmax with classes = 2; \
                     supply problem.dataset for more classes"
                        .into(),
                ));
            }
            let (mut data, _) =
                synthetic_classification_data(n, features, noise, samples_per_agent, seed)?;
            for agent in &mut data {
                for s in agent.train.iter_mut().chain(agent.val.iter_mut()) {
                    s.label = if s.label > 0.0 { 1.0 } else { 0.0 };
                }
            }
            Ok(data)
        }
    }
}

/// Builds the problem instance for one replicate. Returns the instance and
/// the dataset hash when a dataset file was used.
pub fn build_problem(
    cfg: &ProblemConfig,
    n: usize,
    seed: u64,
) -> Result<(BilevelProblem, Option<String>)> {
    match cfg {
        ProblemConfig::Quad { d1, d2, reg } => {
            Ok((quad_bilevel_random(n, *d1, *d2, *reg, seed)?, None))
        }
        ProblemConfig::Ho { loss, classes, dataset, label_col, features, noise, samples_per_agent } => {
            let loss = to_loss(*loss, *classes)?;
            let (data, hash) = match dataset {
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| {
                        DagmError::Config(format!("cannot read {}: {e}", path.display()))
                    })?;
                    let data = read_dataset_csv(&text, label_col)?;
                    (data, Some(hex_sha256(text.as_bytes())))
                }
                None => {
                    let features = features
                        .ok_or_else(|| DagmError::Config("synthetic data needs features".into()))?;
                    let noise = noise.unwrap_or(0.0);
                    let spa = samples_per_agent.unwrap_or(10);
                    (synthetic_agents(loss, n, features, noise, spa, seed)?, None)
                }
            };
            if data.len() != n {
                return Err(DagmError::Config(format!(
                    "dataset holds {} agents but the graph has {n} nodes",
                    data.len()
                )));
            }
            Ok((ho_problem(loss, data)?, hash))
        }
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Resolves the output root: the env override, then the configured dir,
/// then `dagm-out`.
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    let dir = cfg.output.dir.clone().unwrap_or_else(|| PathBuf::from("dagm-out"));
    if dir.is_absolute() {
        return dir;
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(dir),
        None => dir,
    }
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    k: usize,
    hypergrad_norm: Option<f64>,
    consensus_err_x: f64,
    consensus_err_y: f64,
    msgs_d1: u64,
    msgs_d2: u64,
    x_bar: &'a [f64],
    y_bar: &'a [f64],
}

/// JSONL text for a trajectory: one row per snapshot, no wall-clock fields.
pub fn trajectory_jsonl(traj: &Trajectory) -> Result<String> {
    let mut out = String::new();
    for snap in &traj.snapshots {
        let x_bar = snap.state.x_bar();
        let y_bar = snap.state.y_bar();
        let row = TrajectoryRow {
            k: snap.k,
            hypergrad_norm: snap.hypergrad_norm,
            consensus_err_x: snap.consensus_err_x,
            consensus_err_y: snap.consensus_err_y,
            msgs_d1: snap.msgs_d1,
            msgs_d2: snap.msgs_d2,
            x_bar: x_bar.as_slice(),
            y_bar: y_bar.as_slice(),
        };
        out.push_str(&serde_json::to_string(&row)?);
        out.push('\n');
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Metrics CSV for the three stationarity modes. Columns are fixed:
/// k,sc_gap,cvx_gap,ncvx_grad_sq,consensus_err,msgs_d1,msgs_d2.
pub fn stationarity_csv(
    p: &BilevelProblem,
    traj: &Trajectory,
    mode: StationarityMode,
) -> Result<String> {
    let records = stationarity(p, traj, mode)?;
    let mut out = String::from("k,sc_gap,cvx_gap,ncvx_grad_sq,consensus_err,msgs_d1,msgs_d2\n");
    for r in &records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.k,
            fmt_opt(r.sc_gap),
            fmt_opt(r.cvx_gap),
            fmt_opt(r.ncvx_grad_sq),
            r.consensus_err,
            r.msgs_d1,
            r.msgs_d2
        );
    }
    Ok(out)
}

/// Metrics CSV for the hyperparameter family. Columns are fixed:
/// k,train_cost,val_mse,consensus_err,msgs_d1,msgs_d2.
pub fn ho_metrics_csv(p: &BilevelProblem, traj: &Trajectory) -> Result<String> {
    let handle = p.ho_instance().ok_or_else(|| {
        DagmError::Config("ho metrics requested for a non-hyperparameter problem".into())
    })?;
    let mut out = String::from("k,train_cost,val_mse,consensus_err,msgs_d1,msgs_d2\n");
    for snap in &traj.snapshots {
        let y_bar = snap.state.y_bar();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            snap.k,
            handle.mean_train_loss(&y_bar),
            handle.val_mse(&y_bar),
            snap.consensus_err_x,
            snap.msgs_d1,
            snap.msgs_d2
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicateOutcome {
    pub rep: usize,
    pub seed: u64,
    pub dir: String,
    pub final_k: usize,
    pub final_consensus_err: f64,
    pub msgs_d1: u64,
    pub msgs_d2: u64,
    /// Name of the metric in `final_value`; empty when metrics are off.
    pub metric: String,
    pub final_value: Option<f64>,
}

#[derive(Serialize)]
struct ManifestReplicate<'a> {
    rep: usize,
    seed: u64,
    dir: &'a str,
    params: &'a crate::solver::ResolvedParams,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    config_sha256: &'a str,
    dataset_sha256: Option<&'a str>,
    config: &'a ExperimentConfig,
    replicates: Vec<ManifestReplicate<'a>>,
}

/// Everything `cmd_run` produced, for callers that want to inspect results
/// without re-reading the files.
pub struct RunReport {
    pub root: PathBuf,
    pub outcomes: Vec<ReplicateOutcome>,
    pub trajectories: Vec<Trajectory>,
}

fn last_metric_value(csv: &str, column: usize) -> Option<f64> {
    let line = csv.lines().filter(|l| !l.is_empty()).next_back()?;
    line.split(',').nth(column)?.parse().ok()
}

/// Runs every replicate of the configuration and writes the artifact tree:
/// `rep_<i>/trajectory.jsonl`, `rep_<i>/metrics.csv` (when metrics are on),
/// `summary.csv`, and `manifest.json`.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let k = resolved_k(&cfg.run)?;
    if cfg.run.replicates == 0 {
        return Err(DagmError::Config("replicates must be >= 1".into()));
    }
    let root = output_root(cfg);
    fs::create_dir_all(&root)?;

    let config_hash = hex_sha256(serde_json::to_string(cfg)?.as_bytes());
    let mut dataset_hash: Option<String> = None;
    let mut outcomes = Vec::new();
    let mut trajectories = Vec::new();
    let mut params_per_rep = Vec::new();

    for rep in 0..cfg.run.replicates {
        let seed = cfg.run.seed.wrapping_add(rep as u64);
        let graph = build_graph(&cfg.graph, seed)?;
        let w = build_mixing(&cfg.graph, &graph)?;
        let (problem, dhash) = build_problem(&cfg.problem, graph.n(), seed)?;
        if dataset_hash.is_none() {
            dataset_hash = dhash;
        }

        let run_cfg = RunConfig {
            alpha: cfg.run.alpha,
            beta: cfg.run.beta,
            u: cfg.run.u,
            m: cfg.run.m,
            k,
            seed,
            schedule: cfg.run.schedule,
        };
        let traj = dagm_run(&problem, &w, &run_cfg)?;

        let dir_name = format!("rep_{rep}");
        let rep_dir = root.join(&dir_name);
        fs::create_dir_all(&rep_dir)?;
        fs::write(rep_dir.join("trajectory.jsonl"), trajectory_jsonl(&traj)?)?;

        let (metric, csv_text, value_col) = match cfg.output.metrics {
            MetricsMode::StronglyConvex => (
                "sc_gap",
                Some(stationarity_csv(&problem, &traj, StationarityMode::StronglyConvex)?),
                1,
            ),
            MetricsMode::Convex => {
                ("cvx_gap", Some(stationarity_csv(&problem, &traj, StationarityMode::Convex)?), 2)
            }
            MetricsMode::Nonconvex => (
                "ncvx_grad_sq",
                Some(stationarity_csv(&problem, &traj, StationarityMode::Nonconvex)?),
                3,
            ),
            MetricsMode::Ho => ("train_cost", Some(ho_metrics_csv(&problem, &traj)?), 1),
            MetricsMode::None => ("", None, 0),
        };
        let mut final_value = None;
        if let Some(text) = csv_text {
            final_value = last_metric_value(&text, value_col);
            fs::write(rep_dir.join("metrics.csv"), text)?;
        }

        let last = traj.snapshots.last().expect("runs always hold the initial snapshot");
        outcomes.push(ReplicateOutcome {
            rep,
            seed,
            dir: dir_name,
            final_k: last.k,
            final_consensus_err: last.consensus_err_x,
            msgs_d1: last.msgs_d1,
            msgs_d2: last.msgs_d2,
            metric: metric.to_string(),
            final_value,
        });
        params_per_rep.push(traj.params.clone());
        trajectories.push(traj);
    }

    let mut summary = String::from(
        "rep,seed,dir,final_k,final_consensus_err,msgs_d1,msgs_d2,metric,final_value\n",
    );
    for o in &outcomes {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{}",
            o.rep,
            o.seed,
            o.dir,
            o.final_k,
            o.final_consensus_err,
            o.msgs_d1,
            o.msgs_d2,
            o.metric,
            fmt_opt(o.final_value)
        );
    }
    fs::write(root.join("summary.csv"), summary)?;

    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: &config_hash,
        dataset_sha256: dataset_hash.as_deref(),
        config: cfg,
        replicates: outcomes
            .iter()
            .zip(&params_per_rep)
            .map(|(o, params)| ManifestReplicate {
                rep: o.rep,
                seed: o.seed,
                dir: &o.dir,
                params,
            })
            .collect(),
    };
    fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunReport { root, outcomes, trajectories })
}

// ---------------------------------------------------------------------------
// validate / complexity / sweep
// ---------------------------------------------------------------------------

pub struct ValidationOutcome {
    pub report: String,
    pub ok: bool,
}

const VALIDATE_TRIALS: usize = 2000;

/// Checks the replicate-0 instance: mixing-matrix assumptions, declared
/// problem constants, and the derived step-size constants. Hard violations
/// (graph, constants, or run parameters the solver would reject) clear
/// `ok`; step-size warnings do not.
pub fn cmd_validate(cfg: &ExperimentConfig) -> Result<ValidationOutcome> {
    let seed = cfg.run.seed;
    let graph = build_graph(&cfg.graph, seed)?;
    let w = build_mixing(&cfg.graph, &graph)?;
    let (problem, _) = build_problem(&cfg.problem, graph.n(), seed)?;

    let mut report = String::new();
    let mut ok = true;

    let mix = w.validate(&graph);
    let _ = writeln!(report, "mixing matrix ({} nodes):", graph.n());
    let _ = write!(report, "{mix}");
    if !mix.all_passed() {
        ok = false;
    }

    let constants = verify_constants(&problem, VALIDATE_TRIALS, seed);
    let _ = writeln!(report, "\ndeclared constants ({VALIDATE_TRIALS} sampled trials):");
    let _ = write!(report, "{constants}");
    if !constants.all_ok() {
        ok = false;
    }

    let _ = writeln!(report, "\nderived step-size constants:");
    match theory_constants(problem.constants(), &w, cfg.run.beta, cfg.run.alpha, cfg.run.u) {
        Ok(t) => {
            let _ = write!(report, "{t}");
        }
        Err(e) => {
            let _ = writeln!(report, "  unavailable: {e}");
            ok = false;
        }
    }

    Ok(ValidationOutcome { report, ok })
}

/// Closed-form communication budgets plus the exact counter prediction when
/// (k, u, m) are supplied.
pub fn cmd_complexity(
    n: usize,
    d1: usize,
    d2: usize,
    eps: f64,
    sigma: f64,
    counters: Option<(u64, u64, u64)>,
) -> Result<String> {
    let table = complexity_table(n, d1, d2, eps, sigma)?;
    let mut out = format!("{table}");
    if let Some((k, u, m)) = counters {
        let total = counter_prediction(k, u, m, d1 as u64, d2 as u64);
        let _ = writeln!(
            out,
            "exact counter prediction: k ((u+1) d1 + m d2) = {k} (({u}+1) {d1} + {m} {d2}) = {total} \
             per neighbor-normalized unit"
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub dir: String,
    pub final_gap: f64,
}

#[derive(Serialize)]
pub struct SweepReport {
    #[serde(skip)]
    pub root: PathBuf,
    pub rows: Vec<SweepRow>,
    pub slope: Option<f64>,
}

/// Default log-spaced grid over [1e-4, 1e-1].
pub fn default_beta_grid() -> Vec<f64> {
    (0..7).map(|i| 10f64.powf(-4.0 + 3.0 * i as f64 / 6.0)).collect()
}

/// Reruns the replicate-0 configuration once per beta and records the
/// penalty gap along each run (`beta_*/penalty_gap.csv`), then fits the
/// log-log slope of the final gaps (`sweep.csv`, `sweep_summary.json`).
pub fn cmd_sweep(cfg: &ExperimentConfig, betas: &[f64]) -> Result<SweepReport> {
    if betas.len() < 2 {
        return Err(DagmError::Config("sweep needs at least two beta values".into()));
    }
    let k = resolved_k(&cfg.run)?;
    let root = output_root(cfg);
    fs::create_dir_all(&root)?;

    let seed = cfg.run.seed;
    let graph = build_graph(&cfg.graph, seed)?;
    let w = build_mixing(&cfg.graph, &graph)?;
    let (problem, _) = build_problem(&cfg.problem, graph.n(), seed)?;

    let mut rows = Vec::new();
    for &beta in betas {
        let run_cfg = RunConfig {
            alpha: cfg.run.alpha,
            beta,
            u: cfg.run.u,
            m: cfg.run.m,
            k,
            seed,
            schedule: cfg.run.schedule,
        };
        let traj = dagm_run(&problem, &w, &run_cfg)?;
        let mut csv = String::from("k,penalty_gap\n");
        let mut final_gap = f64::NAN;
        for snap in &traj.snapshots {
            let gap = penalty_gap(&problem, &w, beta, &snap.state.x)?;
            let _ = writeln!(csv, "{},{}", snap.k, gap);
            final_gap = gap;
        }
        let dir_name = format!("beta_{beta:.6e}");
        let beta_dir = root.join(&dir_name);
        fs::create_dir_all(&beta_dir)?;
        fs::write(beta_dir.join("penalty_gap.csv"), csv)?;
        rows.push(SweepRow { beta, dir: dir_name, final_gap });
    }

    let points: Vec<(f64, f64)> =
        rows.iter().filter(|r| r.final_gap > 0.0).map(|r| (r.beta, r.final_gap)).collect();
    let slope = if points.len() >= 2 { Some(penalty_gap_slope(&points)?) } else { None };

    let mut csv = String::from("beta,dir,final_gap\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{}", r.beta, r.dir, r.final_gap);
    }
    fs::write(root.join("sweep.csv"), csv)?;
    let report = SweepReport { root: root.clone(), rows, slope };
    fs::write(root.join("sweep_summary.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Exit code policy: configuration and environment problems exit 2; solver
/// runtime failures (divergence, lost contraction, non-SPD blocks, failed
/// reference solves) exit 3.
pub fn exit_code_for(e: &DagmError) -> i32 {
    match e {
        DagmError::Diverged { .. }
        | DagmError::ContractionFailed { .. }
        | DagmError::NonSpdBlock { .. }
        | DagmError::NonConvergence(_)
        | DagmError::ReferenceUnavailable(_) => 3,
        DagmError::Core(dagm_core::CoreError::Eigensolver) => 3,
        _ => 2,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn quad_config(dir: &Path) -> ExperimentConfig {
        parse_config(&format!(
            r#"
            [problem]
            family = "quad"
            d1 = 2
            d2 = 2
            reg = 0.8

            [graph]
            n = 3
            r = 0.7

            [run]
            alpha = 0.05
            beta = 0.8
            u = 3
            m = 10
            k = 5
            seed = 9

            [output]
            dir = "{}"
            metrics = "strongly_convex"
            "#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = quad_config(tmp.path());
        assert_eq!(cfg.run.k, Some(5));
        assert_eq!(cfg.output.metrics, MetricsMode::StronglyConvex);
        apply_overrides(
            &mut cfg,
            &Overrides { k: Some(7), seed: Some(1), ..Overrides::default() },
        );
        assert_eq!(cfg.run.k, Some(7));
        assert_eq!(cfg.run.seed, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config(
            r#"
            [problem]
            family = "quad"
            d1 = 2
            d2 = 2
            typo_field = 1

            [graph]
            n = 2

            [run]
            alpha = 0.1
            beta = 0.5
            k = 1
            "#,
        )
        .unwrap_err();
        assert!(matches!(err, DagmError::Config(_)), "got {err:?}");
    }

    #[test]
    fn epochs_map_to_outer_iterations() {
        let run = RunSection {
            alpha: 0.1,
            beta: 0.5,
            u: 0,
            m: 1,
            k: None,
            epochs: Some(4),
            iterations_per_epoch: 3,
            seed: 0,
            schedule: Schedule::Fixed,
            replicates: 1,
        };
        assert_eq!(resolved_k(&run).unwrap(), 12);
        let neither = RunSection { epochs: None, ..run };
        assert!(resolved_k(&neither).is_err());
    }

    #[test]
    fn run_writes_the_artifact_tree() {
        let tmp = TempDir::new().unwrap();
        let cfg = quad_config(&tmp.path().join("out"));
        let report = cmd_run(&cfg).unwrap();
        assert_eq!(report.outcomes.len(), 1);
        assert!(report.root.join("rep_0/trajectory.jsonl").is_file());
        assert!(report.root.join("rep_0/metrics.csv").is_file());
        assert!(report.root.join("summary.csv").is_file());
        assert!(report.root.join("manifest.json").is_file());
        let metrics = fs::read_to_string(report.root.join("rep_0/metrics.csv")).unwrap();
        assert!(metrics.starts_with("k,sc_gap,cvx_gap,ncvx_grad_sq,consensus_err,msgs_d1,msgs_d2"));
        assert_eq!(metrics.lines().count(), 7, "header + 6 snapshots");
        let manifest = fs::read_to_string(report.root.join("manifest.json")).unwrap();
        assert!(!manifest.contains("wall_clock"), "manifest must not carry timing");
        let trajectory = fs::read_to_string(report.root.join("rep_0/trajectory.jsonl")).unwrap();
        assert!(!trajectory.contains("wall_clock"), "metric files must not carry timing");
        assert_eq!(report.outcomes[0].metric, "sc_gap");
        assert!(report.outcomes[0].final_value.is_some());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let tmp = TempDir::new().unwrap();
        let cfg = quad_config(&tmp.path().join("out"));
        cmd_run(&cfg).unwrap();
        let first = fs::read(tmp.path().join("out/rep_0/trajectory.jsonl")).unwrap();
        let first_metrics = fs::read(tmp.path().join("out/rep_0/metrics.csv")).unwrap();
        let first_summary = fs::read(tmp.path().join("out/summary.csv")).unwrap();
        cmd_run(&cfg).unwrap();
        assert_eq!(first, fs::read(tmp.path().join("out/rep_0/trajectory.jsonl")).unwrap());
        assert_eq!(first_metrics, fs::read(tmp.path().join("out/rep_0/metrics.csv")).unwrap());
        assert_eq!(first_summary, fs::read(tmp.path().join("out/summary.csv")).unwrap());
    }

    #[test]
    fn replicates_reseed_the_instances() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = quad_config(&tmp.path().join("out"));
        cfg.run.replicates = 2;
        cfg.output.metrics = MetricsMode::None;
        let report = cmd_run(&cfg).unwrap();
        assert_eq!(report.outcomes[0].seed + 1, report.outcomes[1].seed);
        let a = fs::read(report.root.join("rep_0/trajectory.jsonl")).unwrap();
        let b = fs::read(report.root.join("rep_1/trajectory.jsonl")).unwrap();
        assert_ne!(a, b, "different seeds must produce different runs");
    }

    #[test]
    fn validate_reports_on_a_sound_config() {
        let tmp = TempDir::new().unwrap();
        let cfg = quad_config(&tmp.path().join("out"));
        let outcome = cmd_validate(&cfg).unwrap();
        assert!(outcome.ok, "report:\n{}", outcome.report);
        assert!(outcome.report.contains("mixing matrix"));
        assert!(outcome.report.contains("declared constants"));
    }

    #[test]
    fn complexity_command_prints_prediction() {
        let out = cmd_complexity(10, 100, 100, 1e-2, 0.5, Some((3, 2, 4))).unwrap();
        assert!(out.contains("this method"));
        // 3 ((2+1) 100 + 4 100) = 2100
        assert!(out.contains("= 2100 "), "got:\n{out}");
    }

    #[test]
    fn ho_synthetic_config_runs_with_ho_metrics() {
        let tmp = TempDir::new().unwrap();
        let cfg = parse_config(&format!(
            r#"
            [problem]
            family = "ho"
            loss = "linear"
            features = 2
            noise = 0.25
            samples_per_agent = 5

            [graph]
            n = 4
            r = 0.6

            [run]
            alpha = 0.05
            beta = 0.05
            u = 2
            m = 5
            k = 4
            seed = 3

            [output]
            dir = "{}"
            metrics = "ho"
            "#,
            tmp.path().join("out").display()
        ))
        .unwrap();
        let report = cmd_run(&cfg).unwrap();
        let metrics = fs::read_to_string(report.root.join("rep_0/metrics.csv")).unwrap();
        assert!(metrics.starts_with("k,train_cost,val_mse,consensus_err,msgs_d1,msgs_d2"));
        assert_eq!(metrics.lines().count(), 6);
    }

    #[test]
    fn sweep_writes_per_beta_series_and_fits_a_slope() {
        let tmp = TempDir::new().unwrap();
        let mut cfg = quad_config(&tmp.path().join("sweep"));
        cfg.run.k = Some(2);
        cfg.output.metrics = MetricsMode::None;
        let betas = [1e-3, 1e-2, 1e-1];
        let report = cmd_sweep(&cfg, &betas).unwrap();
        assert_eq!(report.rows.len(), 3);
        for row in &report.rows {
            assert!(report.root.join(&row.dir).join("penalty_gap.csv").is_file());
            assert!(row.final_gap > 0.0);
        }
        assert!(report.root.join("sweep.csv").is_file());
        let slope = report.slope.unwrap();
        assert!((0.1..1.5).contains(&slope), "slope = {slope}");
    }

    #[test]
    fn exit_codes_split_config_from_runtime() {
        assert_eq!(exit_code_for(&DagmError::Config("x".into())), 2);
        assert_eq!(exit_code_for(&DagmError::InvalidParameter("x".into())), 2);
        assert_eq!(
            exit_code_for(&DagmError::Diverged { iteration: 3, reason: "x".into() }),
            3
        );
        assert_eq!(exit_code_for(&DagmError::ContractionFailed { rho: 1.5 }), 3);
    }
}
