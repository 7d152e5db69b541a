use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cohort_dp::config::{Algorithm, ExperimentConfig};
use cohort_dp::harness::{self, Checkpoint, Run, SweepParameter};
use std::io::Write;
use std::path::{Path, PathBuf};

/// Cohort-level differentially private federated training with continual
/// learning for intrusion detection.
#[derive(Debug, Parser)]
#[command(name = "cohort-dp", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config file (`key = value` lines); built-in defaults otherwise.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the config's algorithm: nonprivate, dp, dp-r or dp-si.
    #[arg(long, global = true, value_name = "NAME")]
    algo: Option<Algorithm>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the client shard manifest and normalization statistics.
    Partition,
    /// Trains to budget exhaustion (or the round cap) and writes metrics,
    /// a checkpoint and the final F1 report.
    Train {
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
        /// Stop once this many rounds have run in total.
        #[arg(long, value_name = "N")]
        stop_after: Option<u64>,
    },
    /// Reopens one exhausted cohort for extra rounds and continues training.
    Relax {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "ID")]
        cohort: usize,
        #[arg(long, value_name = "N", default_value_t = 10)]
        extra_rounds: u64,
    },
    /// Prints delta after each round until the budget is exhausted.
    Accountant {
        /// Sampling fraction; the config's effective fraction by default.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        /// Privacy target; the first cohort's by default.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Delta threshold Q.
        #[arg(long)]
        delta_threshold: Option<f64>,
    },
    /// One training run per value per seed, summarized as CSV.
    Sweep {
        /// rho, gamma or sample_fraction.
        #[arg(long)]
        parameter: SweepParameter,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
    },
    /// Test-set F1 report of a checkpoint.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(algo) = common.algo {
        cfg.algorithm = algo;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let out = &cli.common.out;
    match cli.command {
        Command::Partition => {
            let cfg = load_config(&cli.common)?;
            let (manifest, stats) = harness::write_partition(&cfg, out)?;
            println!("{}\n{}", manifest.display(), stats.display());
        }
        Command::Train { resume, stop_after } => {
            let mut run = match &resume {
                Some(path) => {
                    if cli.common.config.is_some() || cli.common.algo.is_some() || cli.common.seed.is_some() {
                        bail!("--resume takes its configuration from the checkpoint");
                    }
                    Run::from_checkpoint(&load_checkpoint(path)?)?
                }
                None => Run::new(&load_config(&cli.common)?)?,
            };
            run.run_until(stop_after)?;
            let rows = run.finalized_history()?;
            let files = harness::write_run_outputs(&run, &rows, out, "")?;
            let scores = run.final_scores()?;
            eprintln!(
                "{} rounds, client queries {:?}; test micro {:.4} macro {:.4} weighted {:.4}",
                run.state.round,
                run.client_queries(),
                scores.micro_f1,
                scores.macro_f1,
                scores.weighted_f1
            );
            println!("{}\n{}\n{}", files.metrics.display(), files.checkpoint.display(), files.report.display());
        }
        Command::Relax {
            checkpoint,
            cohort,
            extra_rounds,
        } => {
            let cp = load_checkpoint(&checkpoint)?;
            let (run, rows) = harness::relax(&cp, cohort, extra_rounds)?;
            let files = harness::write_run_outputs(&run, &rows, out, &format!("relax{cohort}_"))?;
            println!("{}\n{}\n{}", files.metrics.display(), files.checkpoint.display(), files.report.display());
        }
        Command::Accountant {
            q,
            sigma,
            epsilon,
            delta_threshold,
        } => {
            let cfg = load_config(&cli.common)?;
            let (rows, exhaustion) = harness::accountant_table(
                q.unwrap_or_else(|| cfg.effective_q()),
                sigma.unwrap_or(cfg.sigma),
                epsilon.unwrap_or(cfg.epsilons[0]),
                delta_threshold.unwrap_or(cfg.delta_threshold),
            )?;
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "round,delta")?;
            for (round, delta) in rows {
                writeln!(stdout, "{round},{delta:e}")?;
            }
            writeln!(stdout, "# exhaustion_round = {exhaustion}")?;
        }
        Command::Sweep {
            parameter,
            values,
            seeds,
        } => {
            let cfg = load_config(&cli.common)?;
            let (rows, summary) = harness::sweep(&cfg, parameter, &values, &seeds)?;
            std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            let path = harness::output_path(out, &format!("sweep_{parameter}"), &cfg, "csv");
            let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
            harness::write_sweep_csv(file, &rows, &summary)?;
            println!("{}", path.display());
        }
        Command::Evaluate { checkpoint } => {
            let report = harness::evaluate_checkpoint(&load_checkpoint(&checkpoint)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
