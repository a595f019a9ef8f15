//! Command-line orchestration for pelab: config-driven sweeps, dataset
//! ingestion, similarity analysis and the gradient check.

pub mod analyze;
pub mod config;
pub mod error;
pub mod ingest;
pub mod lst_sweep;
pub mod masked;
pub mod sweep;

use std::path::PathBuf;
use std::process::Command;

use clap::{Args, Parser, Subcommand};
use pelab::numerics::gradcheck::{self, CheckOptions};

use crate::analyze::AnalyzeOptions;
use crate::config::{parse_seeds, Experiment, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::ingest::IngestOptions;
use crate::sweep::{Existing, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "pelab", version, about = "Positional-encoding laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Compare every op and two small models against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Perturb one named check (harness self-test).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Latin-square sweep.
    Lst(SweepArgs),
    /// Simulated-network (or ingested dataset) masked-prediction sweep.
    Nmar(SweepArgs),
    /// Validate and z-score a time × token CSV into a dataset directory.
    Ingest {
        matrix: PathBuf,
        #[arg(long)]
        partition: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare a sweep with a reference scheme and write report.csv.
    Analyze {
        run_dir: PathBuf,
        reference_dir: PathBuf,
        #[arg(long, default_value = analyze::DEFAULT_REFERENCE)]
        reference: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render figures through the Python plotting script.
    ExportPlots {
        /// sigma-boxplot, training-curves, heatmap or scatter-with-rank-corr.
        kind: String,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// A count N (seeds 0..N) or a comma-separated list; overrides the config.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Replace an existing run directory.
    #[arg(long)]
    pub force: bool,
    /// Run directory; defaults to the config's output_dir, else
    /// `$PELAB_OUTPUT_ROOT/<name>` (root defaults to `runs`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, short)]
    pub quiet: bool,
}

pub const PYTHON_ENV: &str = "PELAB_PYTHON";
pub const PLOTS_SCRIPT_ENV: &str = "PELAB_PLOTS_SCRIPT";
pub const DEFAULT_PLOTS_SCRIPT: &str = "plots/pelab_plots.py";

fn load_sweep_config(args: &SweepArgs) -> CliResult<(ExperimentConfig, PathBuf, RunOptions)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = &args.seeds {
        cfg.seeds = parse_seeds(s)?;
    }
    if args.workers == 0 {
        return Err(CliError::validation("--workers must be at least 1"));
    }
    let dir = args.out.clone().unwrap_or_else(|| sweep::default_run_dir(&cfg));
    let opts = RunOptions {
        existing: if args.force { Existing::Force } else { Existing::Refuse },
        workers: args.workers,
        verbose: !args.quiet,
    };
    Ok((cfg, dir, opts))
}

/// Executes one parsed command, printing results on stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Cmd::Gradcheck { seed, corrupt } => {
            let opts = CheckOptions {
                corrupt,
                ..CheckOptions::default()
            };
            let report = gradcheck::run_suite(seed, &opts)?;
            println!("{report}");
            if report.passed() {
                Ok(())
            } else {
                let names: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
                Err(CliError::validation(format!("gradient check failed for {}", names.join(", "))))
            }
        }
        Cmd::Lst(args) => {
            let (cfg, dir, opts) = load_sweep_config(&args)?;
            if !matches!(cfg.experiment, Experiment::Lst { .. }) {
                return Err(CliError::validation(format!("{} is not an lst config", args.config.display())));
            }
            let out = lst_sweep::run_lst(&cfg, &dir, &opts)?;
            println!("{}", lst_sweep::SUMMARY_HEADER);
            for r in &out.results {
                println!("{}", lst_sweep::summary_row(r));
            }
            println!("# wrote {}", out.sweep.dir.display());
            Ok(())
        }
        Cmd::Nmar(args) => {
            let (cfg, dir, opts) = load_sweep_config(&args)?;
            if matches!(cfg.experiment, Experiment::Lst { .. }) {
                return Err(CliError::validation(format!("{} is an lst config; use `pelab lst`", args.config.display())));
            }
            let out = masked::run_masked(&cfg, &dir, &opts)?;
            println!("{}", masked::SUMMARY_HEADER);
            for r in &out.results {
                println!("{}", masked::summary_row(r));
            }
            println!("# wrote {}", out.sweep.dir.display());
            Ok(())
        }
        Cmd::Ingest { matrix, partition, out, force } => {
            let info = ingest::ingest(&IngestOptions {
                matrix,
                partition,
                out: out.clone(),
                force,
            })?;
            println!("ingested {} timepoints × {} tokens into {}", info.n_timepoints, info.n_tokens, out.display());
            Ok(())
        }
        Cmd::Analyze {
            run_dir,
            reference_dir,
            reference,
            out,
        } => {
            let report = analyze::analyze(&AnalyzeOptions {
                run_dir,
                reference_dir,
                reference,
                out,
            })?;
            for r in report.rows.iter().filter(|r| r.model == analyze::SWEEP_MODEL) {
                println!("{} = {:.4}", r.metric, r.value);
            }
            println!("# wrote {}", report.path.display());
            Ok(())
        }
        Cmd::ExportPlots { kind, inputs, output } => export_plots(&kind, &inputs, &output),
    }
}

/// Shells out to the plotting script; metrics are never computed there.
pub fn export_plots(kind: &str, inputs: &[PathBuf], output: &std::path::Path) -> CliResult<()> {
    let python = std::env::var_os(PYTHON_ENV).unwrap_or_else(|| "python3".into());
    let script = std::env::var_os(PLOTS_SCRIPT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_PLOTS_SCRIPT));
    if !script.exists() {
        return Err(CliError::runtime(format!(
            "plotting script {} not found; set {PLOTS_SCRIPT_ENV}",
            script.display()
        )));
    }
    let status = Command::new(&python)
        .arg(&script)
        .arg(kind)
        .args(inputs)
        .arg("--output")
        .arg(output)
        .status()
        .map_err(|e| CliError::runtime(format!("cannot start {}: {e}", python.to_string_lossy())))?;
    match status.code() {
        Some(0) => Ok(()),
        Some(1) => Err(CliError::validation(format!("plotting script rejected its inputs ({status})"))),
        _ => Err(CliError::runtime(format!("plotting script failed ({status})"))),
    }
}
