//! Command-line front end: run / validate / complexity / sweep.
//!
//! Exit codes: 0 success, 2 configuration or environment problem,
//! 3 runtime failure (divergence, lost contraction, failed reference solve).

use clap::{Args, Parser, Subcommand};
use dagm::experiment::{
    apply_overrides, cmd_complexity, cmd_run, cmd_sweep, cmd_validate, default_beta_grid,
    exit_code_for, load_config, ExperimentConfig, MetricsMode, Overrides,
};
use dagm::{DagmError, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dagm",
    about = "Penalty-based decentralized bilevel optimization over simulated networks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment configuration file.
    #[arg(long, short)]
    config: PathBuf,
    /// Outer step size alpha (overrides the file).
    #[arg(long)]
    alpha: Option<f64>,
    /// Penalty parameter beta (overrides the file).
    #[arg(long)]
    beta: Option<f64>,
    /// Neumann truncation order U (overrides the file).
    #[arg(long)]
    u: Option<usize>,
    /// Inner gradient steps M per outer iteration (overrides the file).
    #[arg(long)]
    m: Option<usize>,
    /// Outer iterations K (overrides the file).
    #[arg(long)]
    k: Option<usize>,
    /// Base random seed (overrides the file).
    #[arg(long)]
    seed: Option<u64>,
    /// Replicate count (overrides the file).
    #[arg(long)]
    replicates: Option<usize>,
    /// Output directory (overrides the file; relative paths go under
    /// $DAGM_OUTPUT_ROOT when that variable is set).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Metric series to write: strongly_convex | convex | nonconvex | ho | none.
    #[arg(long, value_parser = parse_metrics)]
    metrics: Option<MetricsMode>,
}

fn parse_metrics(s: &str) -> std::result::Result<MetricsMode, String> {
    match s {
        "strongly_convex" => Ok(MetricsMode::StronglyConvex),
        "convex" => Ok(MetricsMode::Convex),
        "nonconvex" => Ok(MetricsMode::Nonconvex),
        "ho" => Ok(MetricsMode::Ho),
        "none" => Ok(MetricsMode::None),
        other => Err(format!(
            "unknown metrics mode {other:?}; expected strongly_convex, convex, nonconvex, ho, or none"
        )),
    }
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = load_config(&self.config)?;
        apply_overrides(
            &mut cfg,
            &Overrides {
                alpha: self.alpha,
                beta: self.beta,
                u: self.u,
                m: self.m,
                k: self.k,
                seed: self.seed,
                replicates: self.replicates,
                output_dir: self.output_dir.clone(),
                metrics: self.metrics,
            },
        );
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write trajectory, metrics,
    /// summary, and manifest files.
    Run(ConfigArgs),
    /// Check the mixing matrix, declared problem constants, and derived
    /// step-size constants for the configured instance.
    Validate(ConfigArgs),
    /// Print communication budgets for a target accuracy, plus the exact
    /// message count for explicit (k, u, m).
    Complexity {
        /// Network size.
        #[arg(long)]
        n: usize,
        /// Outer variable dimension per node.
        #[arg(long)]
        d1: usize,
        /// Inner variable dimension per node.
        #[arg(long)]
        d2: usize,
        /// Target accuracy epsilon.
        #[arg(long)]
        eps: f64,
        /// Network spectral gap parameter sigma in [0, 1).
        #[arg(long)]
        sigma: f64,
        /// Outer iterations for the exact counter prediction.
        #[arg(long)]
        k: Option<u64>,
        /// Neumann truncation order for the exact counter prediction.
        #[arg(long)]
        u: Option<u64>,
        /// Inner steps for the exact counter prediction.
        #[arg(long)]
        m: Option<u64>,
    },
    /// Re-run the configuration across a beta grid and record the distance
    /// between penalized and constrained inner solutions.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated beta grid (default: 7 log-spaced points in
        /// [1e-4, 1e-1]).
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.load()?;
            let report = cmd_run(&cfg)?;
            println!("wrote {} replicate(s) under {}", report.outcomes.len(), report.root.display());
            for o in &report.outcomes {
                match (o.metric.is_empty(), o.final_value) {
                    (false, Some(v)) => println!(
                        "  rep {} (seed {}): k = {}, consensus err = {:.3e}, {} = {:.6e}",
                        o.rep, o.seed, o.final_k, o.final_consensus_err, o.metric, v
                    ),
                    _ => println!(
                        "  rep {} (seed {}): k = {}, consensus err = {:.3e}",
                        o.rep, o.seed, o.final_k, o.final_consensus_err
                    ),
                }
            }
            Ok(0)
        }
        Command::Validate(args) => {
            let cfg = args.load()?;
            let outcome = cmd_validate(&cfg)?;
            print!("{}", outcome.report);
            if outcome.ok {
                println!("\nvalidation passed");
                Ok(0)
            } else {
                println!("\nvalidation FAILED");
                Ok(2)
            }
        }
        Command::Complexity { n, d1, d2, eps, sigma, k, u, m } => {
            let counters = match (k, u, m) {
                (Some(k), Some(u), Some(m)) => Some((k, u, m)),
                (None, None, None) => None,
                _ => {
                    return Err(DagmError::Config(
                        "the exact counter prediction needs all of --k, --u, --m".into(),
                    ))
                }
            };
            print!("{}", cmd_complexity(n, d1, d2, eps, sigma, counters)?);
            Ok(0)
        }
        Command::Sweep { config, betas } => {
            let cfg = config.load()?;
            let betas = betas.unwrap_or_else(default_beta_grid);
            let report = cmd_sweep(&cfg, &betas)?;
            println!("wrote {} beta run(s) under {}", report.rows.len(), report.root.display());
            for row in &report.rows {
                println!("  beta = {:.6e}: final gap = {:.6e}", row.beta, row.final_gap);
            }
            match report.slope {
                Some(s) => println!("fitted log-log slope of gap vs beta: {s:.4}"),
                None => println!("not enough positive gaps to fit a slope"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
