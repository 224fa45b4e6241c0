use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pbdw_cli::config::{Scale, Test1Config, Test2Config, TrainConfig};
use pbdw_cli::pipeline::{cmd_estimate, cmd_solve, cmd_train, EstimateOptions};
use pbdw_cli::test1::run_test1;
use pbdw_cli::test2::run_test2;

/// Nonlinear reduced-model state and parameter estimation for parametrized
/// elliptic PDEs from local-average measurements.
#[derive(Parser)]
#[command(name = "pbdw", version, about)]
struct Cli {
    /// Rayon thread count (0 = all cores). Outputs are deterministic either way.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonRun {
    /// Preset problem sizes.
    #[arg(long, value_enum, default_value = "desk")]
    scale: Scale,
    /// Master seed; sub-streams (training, test, sensors, noise) derive
    /// from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for CSV/JSON reports.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON config overriding the scale preset entirely.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Two mirror-image diffusion models: affine vs selected local estimators.
    Test1 {
        #[command(flatten)]
        common: CommonRun,
    },
    /// Greedy dyadic splitting study across (d, m, c) regimes.
    Test2 {
        #[command(flatten)]
        common: CommonRun,
        /// Cell budget override.
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Build a reduced family from a JSON config and serialize it.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Solve the trained model at a parameter and emit an observation.
    Solve {
        #[arg(long)]
        family: PathBuf,
        /// Comma-separated parameter vector, e.g. "0.1,-0.4,0.9,0.0".
        #[arg(long, allow_hyphen_values = true)]
        y: String,
        /// Uniform noise amplitude added to the raw measurements.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Reconstruct state and parameter from a serialized observation.
    Estimate {
        #[arg(long)]
        family: PathBuf,
        #[arg(long)]
        observation: PathBuf,
        /// Refine the selected estimate by alternating residual minimization.
        #[arg(long)]
        altmin: bool,
        #[arg(long, default_value_t = 50)]
        altmin_max_iters: usize,
        #[arg(long, default_value_t = 1e-10)]
        altmin_tol: f64,
        /// Claimed l2 bound on the raw measurement noise; adds the
        /// noise-aware bounds to the report.
        #[arg(long)]
        noise: Option<f64>,
        /// Minimize surrogates over the full parameter box instead of each cell.
        #[arg(long)]
        global_surrogate: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config<T: serde::de::DeserializeOwned>(path: &PathBuf) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

fn parse_vector(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .with_context(|| format!("bad vector entry {t:?}"))
        })
        .collect()
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring the thread pool")?;
    }

    match cli.command {
        Command::Test1 { common } => {
            let cfg: Test1Config = match &common.config {
                Some(path) => load_config(path)?,
                None => Test1Config::at_scale(common.scale, common.seed),
            };
            let report = run_test1(&cfg)?;
            report.write_outputs(&common.out)?;
            std::fs::write(
                common.out.join("run.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "command": "test1",
                    "config": cfg,
                    "config_hash": report.config_hash,
                    "n_star": report.n_star,
                    "surrogate_counts": report.surrogate_counts,
                    "oracle_counts": report.oracle_counts,
                }))?,
            )?;
            for c in &report.surrogate_counts {
                println!(
                    "surrogate selection, test set {}: {:.1}% correct",
                    c.test_set,
                    100.0 * c.success_rate
                );
            }
            for c in &report.oracle_counts {
                println!(
                    "oracle selection, test set {}: {:.1}% correct",
                    c.test_set,
                    100.0 * c.success_rate
                );
            }
            println!("reports written to {}", common.out.display());
        }
        Command::Test2 { common, k_max } => {
            let mut cfg: Test2Config = match &common.config {
                Some(path) => load_config(path)?,
                None => Test2Config::at_scale(common.scale, common.seed),
            };
            if let Some(k) = k_max {
                cfg.k_max = k;
            }
            let report = run_test2(&cfg)?;
            report.write_outputs(&common.out)?;
            std::fs::write(
                common.out.join("run.json"),
                serde_json::to_string_pretty(&serde_json::json!({
                    "command": "test2",
                    "config": cfg,
                    "config_hash": report.config_hash,
                    "rows": report.rows.len(),
                }))?,
            )?;
            println!(
                "{} rows written to {}",
                report.rows.len(),
                common.out.join("families.csv").display()
            );
        }
        Command::Train { config, out } => {
            let cfg: TrainConfig = load_config(&config)?;
            let summary = cmd_train(&cfg, &out)?;
            println!(
                "family: K = {}, sigma = {:.3e}, converged = {}",
                summary.k, summary.sigma_achieved, summary.converged
            );
        }
        Command::Solve {
            family,
            y,
            noise,
            noise_seed,
            out,
        } => {
            let y = parse_vector(&y)?;
            if y.is_empty() {
                bail!("parameter vector is empty");
            }
            let summary = cmd_solve(&family, &y, noise, noise_seed, &out)?;
            println!(
                "state norm {:.6e}; observation at {}",
                summary.state_norm, summary.observation_file
            );
        }
        Command::Estimate {
            family,
            observation,
            altmin,
            altmin_max_iters,
            altmin_tol,
            noise,
            global_surrogate,
            out,
        } => {
            let opts = EstimateOptions {
                altmin,
                altmin_max_iters,
                altmin_tol,
                noise_bound: noise,
                global_surrogate,
            };
            let report = cmd_estimate(&family, &observation, &opts, &out)?;
            println!(
                "selected cell {}, y* = {:?}, residual = {:.3e}",
                report.k_star, report.y_star, report.residual_norm
            );
            println!("report written to {}", out.join("estimate.json").display());
        }
    }
    Ok(())
}
