//! Batch runner for random circle-map experiments.
//!
//! `rcm <subcommand> --config <file>` runs one experiment family and writes
//! `<out>/<subcommand>/<config-stem>-s<seed>/{data.csv, summary.json,
//! manifest.json}`. `rcm accept` runs the acceptance suite and `rcm report
//! <dir>` summarizes the manifests under a directory.
//!
//! Exit status: 2 for configuration errors, 1 when any check fails, 0
//! otherwise.

// `!(x < y)` comparisons deliberately treat NaN as a failure.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod commands;
pub mod config;
pub mod output;
pub mod report;
pub mod suite;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand as ClapSubcommand};
use rcm_core::rng::{purpose, StreamRng};
use serde_json::json;

use crate::commands::{run_subcommand, Context, Subcommand};
use crate::config::LoadedConfig;
use crate::output::{Check, RunDir, DATA, SUMMARY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// An independent seed for experiment `id` under `seed`.
pub fn derive_seed(seed: u64, id: u64) -> u64 {
    StreamRng::new(seed, purpose::EXPERIMENT, id).bits()
}

#[derive(Debug, Parser)]
#[command(name = "rcm", version, about = "Random circle-map experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; defaults to the configured `output`, then `runs`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overrides the grid size.
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `dotted.key=value`; the value is parsed as JSON when possible.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, ClapSubcommand)]
pub enum Command {
    /// Moments of the ensemble and E[R_n^2].
    Moments,
    /// Stationary density and occupation histogram.
    Stationary,
    /// Pathwise memory loss along sampled sequences.
    MemoryLoss,
    /// Tail of the coupling counts.
    Coupling,
    /// First passage tail of the coefficient recursion.
    RdeTail,
    /// Correlation curve, operator and Monte Carlo.
    Correlation,
    /// Limit covariance by series and batch means, and variance growth.
    Covariance,
    /// Normal approximation of Birkhoff sums.
    Clt,
    /// Cobounding function and degeneracy.
    Coboundary,
    /// Decay of multiple correlations.
    MultiCorr,
    /// Runs the acceptance suite.
    Accept,
    /// Summarizes the run manifests under a directory.
    Report {
        /// Directory to scan.
        dir: PathBuf,
    },
}

impl Command {
    fn experiment(&self) -> Option<Subcommand> {
        Some(match self {
            Command::Moments => Subcommand::Moments,
            Command::Stationary => Subcommand::Stationary,
            Command::MemoryLoss => Subcommand::MemoryLoss,
            Command::Coupling => Subcommand::Coupling,
            Command::RdeTail => Subcommand::RdeTail,
            Command::Correlation => Subcommand::Correlation,
            Command::Covariance => Subcommand::Covariance,
            Command::Clt => Subcommand::Clt,
            Command::Coboundary => Subcommand::Coboundary,
            Command::MultiCorr => Subcommand::MultiCorr,
            Command::Accept | Command::Report { .. } => return None,
        })
    }
}

/// Parses `args` and runs the command, returning the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("warning: thread pool already configured: {e}");
        }
    }
    if let Command::Report { dir } = &cli.command {
        return match report::report(dir) {
            Ok(rep) => {
                print!("{}", rep.to_text());
                EXIT_OK
            }
            Err(e) => {
                eprintln!("error: cannot write report under {}: {e}", dir.display());
                EXIT_FAILED
            }
        };
    }
    let Some(path) = &cli.config else {
        eprintln!("error: --config <path> is required");
        return EXIT_CONFIG;
    };
    let loaded = match config::load(path, &cli.overrides, cli.seed, cli.grid) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let ensemble = match loaded.config.build_ensemble() {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {}: ensemble: {e}", path.display());
            return EXIT_CONFIG;
        }
    };
    let out = cli
        .out
        .clone()
        .or_else(|| loaded.config.output.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let result = match cli.command.experiment() {
        Some(cmd) => run_experiment(cmd, &loaded, &ensemble, &out),
        None => run_accept(&loaded, &ensemble, &out),
    };
    match result {
        Ok((dir, manifest)) => {
            for c in &manifest.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            println!("wrote {}", dir.display());
            if manifest.passed {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

fn run_name(loaded: &LoadedConfig) -> String {
    format!("{}-s{}", loaded.stem, loaded.config.seed)
}

fn run_experiment(
    cmd: Subcommand,
    loaded: &LoadedConfig,
    ensemble: &rcm_core::ensemble::Ensemble,
    out: &Path,
) -> std::io::Result<(PathBuf, output::RunManifest)> {
    let mut run = RunDir::create(out, cmd.name(), &run_name(loaded))?;
    let ctx = Context { loaded, ensemble };
    let checks = run_subcommand(cmd, &ctx, &mut run)?;
    let dir = run.path().to_path_buf();
    let manifest = run.finish(cmd.name(), loaded, checks)?;
    Ok((dir, manifest))
}

fn run_accept(
    loaded: &LoadedConfig,
    ensemble: &rcm_core::ensemble::Ensemble,
    out: &Path,
) -> std::io::Result<(PathBuf, output::RunManifest)> {
    let mut run = RunDir::create(out, "accept", &run_name(loaded))?;
    let seed = loaded.config.seed;
    let first = suite::run_criteria(ensemble, seed, &mut |c| println!("{}", c.line()));
    let second = suite::run_criteria(ensemble, seed, &mut |_| {});
    let det = suite::determinism(&first, &second);
    println!("{}", det.line());
    let mut table = String::from("criterion,name,passed,checks_passed,budget_seconds,detail\n");
    let mut checks = Vec::new();
    for c in first.iter().chain(std::iter::once(&det)) {
        for (name, csv) in &c.files {
            run.write(name, csv)?;
        }
        run.add_timing(&format!("criterion {}", c.id), c.seconds);
        table.push_str(&format!(
            "{},{},{},{},{},\"{}\"\n",
            c.id,
            c.name,
            c.passed,
            c.checks_passed,
            c.budget_seconds,
            c.detail.replace('"', "'")
        ));
        checks.push(Check::new(
            format!("criterion {}: {}", c.id, c.name),
            c.passed,
            c.detail.clone(),
        ));
    }
    run.write(DATA, &table)?;
    let all: Vec<_> = first.iter().chain(std::iter::once(&det)).collect();
    run.write_json(SUMMARY, &json!({ "criteria": all }))?;
    let dir = run.path().to_path_buf();
    let manifest = run.finish("accept", loaded, checks)?;
    Ok((dir, manifest))
}
