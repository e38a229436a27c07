//! Command-line driver: dataset generation, training, evaluation,
//! prediction, desk-scale experiments and diagnostics.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rcnet::{Error, Result};

pub use config::RunConfig;

/// Exit codes, one per error family.
pub mod exit {
    pub const OK: i32 = 0;
    pub const OTHER: i32 = 1;
    /// Command-line usage errors (reported by the argument parser).
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const DATA: i32 = 4;
    pub const VALIDATION: i32 = 5;
    pub const DIVERGENCE: i32 = 6;
    /// A gradient check ran but exceeded its tolerance.
    pub const CHECK_FAILED: i32 = 7;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => exit::CONFIG,
        Error::Data(_) | Error::Format(_) | Error::DegenerateVariance(_) => exit::DATA,
        Error::Validation(_) | Error::Dimension(_) | Error::Index(_) | Error::Geometry(_) => exit::VALIDATION,
        Error::Divergence(_) | Error::NonFinite(_) => exit::DIVERGENCE,
        _ => exit::OTHER,
    }
}

#[derive(Debug, Parser)]
#[command(name = "rcnet", version, about = "Beam-partitioned recurrent point-cloud networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration file (`key = value` lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and training order.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Request bitwise-reproducible execution (always the case; recorded in the echo).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Scalar width: 32 or 64.
    #[arg(long, global = true, value_name = "32|64")]
    pub precision: Option<String>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    BeamSize,
    Dropout,
    Ablation,
    Ensemble,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic train/test splits as PCV1 files plus a manifest.
    GenerateSynth,
    /// Train a model (or a three-axis ensemble) on the `data` directory.
    Train,
    /// Evaluate a checkpoint or ensemble manifest on the `data` directory.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Class or per-point predictions for one PCV1 cloud.
    Predict {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
    /// Desk-scale studies written as CSV tables.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
    },
    /// Finite-difference gradient check of a micro model (always 64-bit).
    Gradcheck {
        /// Test fixture: add 1 to the analytic gradient of this tensor.
        #[arg(long, hide = true, value_name = "NAME")]
        corrupt: Option<String>,
    },
    /// Beam table of one PCV1 cloud; with a checkpoint, also its feature map.
    DumpBeams {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

/// Config file, then `--set` overrides, then the dedicated global flags.
pub fn resolve_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::parse(&std::fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(s) = g.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if g.deterministic {
        cfg.deterministic = true;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(p) = &g.precision {
        cfg.precision = config::parse_precision(p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one invocation; returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    let result = resolve_config(&cli.global).and_then(|cfg| commands::dispatch(&cli.command, &cfg));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("rcnet: {e}");
            exit_code(&e)
        }
    }
}
