//! `lpc`: train and evaluate hierarchical latent Gaussian generative
//! models with predictive coding and Laplace Monte Carlo objectives.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpc_core::objectives::ObjectiveKind;

use config::FlagOverrides;

#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration or argument combination (exit 2).
    Config(String),
    /// A required input file or field is missing (exit 2).
    MissingInput(String),
    /// Checkpoint and dataset disagree on dimensions (exit 3).
    DimMismatch(String),
    /// Runtime failure (exit 1).
    Other(lpc_core::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::MissingInput(m) => write!(f, "{m}"),
            CliError::DimMismatch(m) => write!(f, "{m}"),
            CliError::Other(e) => write!(f, "{e}"),
        }
    }
}

impl From<lpc_core::Error> for CliError {
    fn from(e: lpc_core::Error) -> Self {
        match e {
            lpc_core::Error::Config(m) => CliError::Config(m),
            lpc_core::Error::Format(m) => CliError::Config(format!("format error: {m}")),
            other => CliError::Other(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(lpc_core::Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingInput(_) => 2,
            CliError::DimMismatch(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "lpc", version, about = "Hierarchical latent Gaussian generative models: predictive coding and Laplace Monte Carlo training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named configuration preset (1: leaky ReLU / learned variance /
    /// combined; 2: tanh / fixed / combined; 3: tanh / fixed / plain).
    #[arg(long)]
    preset: Option<u8>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to out_dir in the config, then the
    /// LPC_OUT_DIR environment variable).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker thread cap (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, per-epoch checkpoints, and a final
    /// evaluation report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Training objective: pc | lmc | almc.
        #[arg(long)]
        objective: Option<String>,
        /// Combined mode: bottom latent layers keep the PC posterior.
        #[arg(long)]
        combined: Option<bool>,
    },
    /// Importance-sampled evaluation of a checkpoint.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Importance sample count (overrides eval_s).
        #[arg(long)]
        s: Option<usize>,
        /// Also print the exact data marginal (synthetic data only).
        #[arg(long)]
        exact_marginal: bool,
    },
    /// Ancestral samples written as PGM images.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        /// Per-conditional temperatures, e.g. "1,1,0,0"; defaults to the
        /// standard schedule (1 everywhere, 0 for the last two).
        #[arg(long)]
        temps: Option<String>,
    },
    /// Linear latent interpolation between two dataset samples.
    Interp {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// First sample index.
        #[arg(long)]
        a: usize,
        /// Second sample index.
        #[arg(long)]
        b: usize,
        /// Hierarchical layer to interpolate at (0 = top).
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
    },
    /// Dump block and full Hessians as CSV with PSD statistics.
    HessianCheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_samples: usize,
    },
}

fn resolve_common(
    common: &CommonArgs,
    objective: Option<&str>,
    combined: Option<bool>,
) -> Result<config::Resolved, CliError> {
    let objective = match objective {
        None => None,
        Some(s) => Some(ObjectiveKind::parse(s).map_err(|e| CliError::Config(e.to_string()))?),
    };
    let flags = FlagOverrides {
        objective,
        combined,
        seed: common.seed,
        out: common.out.clone(),
        threads: common.threads,
    };
    let cfg = config::resolve_from_file(common.preset, common.config.as_deref(), &flags)?;
    if cfg.threads > 0 {
        // Ignore the error if a global pool already exists (tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    Ok(cfg)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train { common, objective, combined } => {
            let cfg = resolve_common(common, objective.as_deref(), *combined)?;
            commands::cmd_train(&cfg)
        }
        Cmd::Eval { common, checkpoint, s, exact_marginal } => {
            let cfg = resolve_common(common, None, None)?;
            commands::cmd_eval(&cfg, checkpoint, *s, *exact_marginal)
        }
        Cmd::Sample { common, checkpoint, n, temps } => {
            let cfg = resolve_common(common, None, None)?;
            commands::cmd_sample(&cfg, checkpoint, *n, temps.as_deref())
        }
        Cmd::Interp { common, checkpoint, a, b, layer, steps } => {
            let cfg = resolve_common(common, None, None)?;
            commands::cmd_interp(&cfg, checkpoint, *a, *b, *layer, *steps)
        }
        Cmd::HessianCheck { common, checkpoint, n_samples } => {
            let cfg = resolve_common(common, None, None)?;
            commands::cmd_hessian_check(&cfg, checkpoint, *n_samples)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
