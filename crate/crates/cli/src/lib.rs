//! Command-line front end for the `timeshoot` library.
//!
//! Each subcommand reads a TOML preset, runs one experiment on a local rayon
//! pool and writes CSV artifacts into the output directory.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod output;
pub mod preset;
pub mod selftest;

use preset::LoadedPreset;

#[derive(Debug, Parser)]
#[command(name = "timeshoot", version, about = "Multiple shooting solves, gradient checks and control training")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Preset file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true, env = "TIMESHOOT_THREADS")]
    pub threads: Option<usize>,
    /// Overrides the preset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the preset root-finding method.
    #[arg(long, global = true, value_parser = ["newton-fw", "newton-jvp", "parareal", "dense-ref"])]
    pub method: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Multiple shooting solve compared with a sequential reference.
    Solve {
        /// Overrides the iteration cap; 0 only initializes.
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Compare adjoint, implicit and finite-difference gradients.
    Gradcheck {
        /// Hand the gradient paths an unconverged state.
        #[arg(long)]
        stale: bool,
    },
    /// Train the controller with fixed-point tracking.
    Control {
        /// Train with the sequential baseline solver instead.
        #[arg(long)]
        baseline: bool,
        /// Overrides the number of epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tracking error against the learning rate.
    TrackScaling,
    /// NFE and wall-clock sweep over methods, N and thread counts.
    Bench,
    /// Quick built-in acceptance checks.
    Selftest,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] timeshoot::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Core(e) => e.kind(),
            CliError::Io(_) => "io",
            CliError::Csv(_) => "csv",
            CliError::Check(_) => "check_failed",
        }
    }

    /// 2 for bad input, 3 for numerical failure, 4 for failed checks.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !matches!(e.kind(), "config" | "io") => 3,
            CliError::Check(_) => 4,
            _ => 2,
        }
    }

    /// The single line printed on failure.
    pub fn report_line(&self) -> String {
        format!(
            "error kind={} exit={} message={}",
            self.kind(),
            self.exit_code(),
            serde_json::to_string(&self.to_string()).expect("strings serialize")
        )
    }
}

/// Everything a subcommand needs besides its own flags.
pub struct RunContext {
    pub preset: LoadedPreset,
    pub out: PathBuf,
    pub threads: usize,
}

impl RunContext {
    pub fn hash(&self) -> String {
        self.preset.config_hash()
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }
}

fn load_preset(global: &GlobalArgs) -> Result<LoadedPreset, CliError> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let mut loaded = LoadedPreset::from_file(path)?;
    if let Some(seed) = global.seed {
        loaded.preset.seed = seed;
    }
    if let Some(method) = &global.method {
        loaded.preset.solve.method = method.clone();
    }
    Ok(loaded)
}

fn thread_count(requested: Option<usize>) -> Result<usize, CliError> {
    match requested {
        Some(0) => Err(CliError::Config("--threads must be at least 1".into())),
        Some(n) => Ok(n),
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.global.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {threads} worker threads: {e}")))?;

    if let Command::Selftest = cli.command {
        ensure_dir(&cli.global.out)?;
        return pool.install(|| selftest::run(&cli.global.out));
    }

    let ctx = RunContext {
        preset: load_preset(&cli.global)?,
        out: cli.global.out.clone(),
        threads,
    };
    ensure_dir(&ctx.out)?;
    pool.install(|| match cli.command {
        Command::Solve { max_iters } => commands::solve(&ctx, max_iters),
        Command::Gradcheck { stale } => commands::gradcheck(&ctx, stale),
        Command::Control { baseline, epochs } => commands::control(&ctx, baseline, epochs),
        Command::TrackScaling => commands::track_scaling(&ctx),
        Command::Bench => commands::bench(&ctx),
        Command::Selftest => unreachable!(),
    })
}
