//! `hsfuse`: simulate observations, fuse them, and score the result.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid input or
//! configuration, 3 numerical failure.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hsfuse_core::FusionError;

use crate::config::{Overrides, ScenarioConfig, SyntheticScene};

/// Errors raised by the front end itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid input:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),
}

#[derive(Parser)]
#[command(
    name = "hsfuse",
    version,
    about = "Hyperspectral/multispectral image fusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct TruthArgs {
    /// Ground-truth cube (.cube with JSON header, or an ENVI .hdr)
    #[arg(long, conflicts_with = "synthetic")]
    truth: Option<PathBuf>,
    /// Generate a seeded low-rank scene instead: ROWSxCOLSxBANDS[:RANK]
    #[arg(long)]
    synthetic: Option<SyntheticScene>,
}

#[derive(Subcommand)]
enum Command {
    /// Degrade a truth cube into an HS/MS pair
    Simulate {
        #[command(flatten)]
        truth: TruthArgs,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Fuse an HS/MS pair
    Fuse {
        #[arg(long)]
        hs: PathBuf,
        #[arg(long)]
        ms: PathBuf,
        /// Noise record written by `simulate`; otherwise give guessed SNRs
        #[arg(long)]
        lambdas: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Score a candidate against a reference
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long, default_value = "candidate")]
        method: String,
        /// ERGAS resolution ratio; defaults to 1/downsample²
        #[arg(long)]
        ratio: Option<f64>,
        /// diagnostics.json of the run, for the alg_time_s column
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// simulate + fuse + evaluate
    Pipeline {
        #[command(flatten)]
        truth: TruthArgs,
        /// Repeat the run at each HS SNR, e.g. 5,8,10
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        snr_sweep: Option<Vec<f64>>,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn scenario(
    overrides: &Overrides,
    synthetic: Option<SyntheticScene>,
) -> anyhow::Result<ScenarioConfig> {
    let mut c = ScenarioConfig::resolve(overrides)?;
    if synthetic.is_some() {
        c.synthetic = synthetic;
    }
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate {
            truth,
            overrides,
            out_dir,
        } => {
            let c = scenario(&overrides, truth.synthetic)?;
            commands::simulate(truth.truth.as_deref(), &c, &out_dir)
        }
        Command::Fuse {
            hs,
            ms,
            lambdas,
            overrides,
            out_dir,
        } => {
            let c = scenario(&overrides, None)?;
            commands::fuse_files(&hs, &ms, lambdas.as_deref(), &c, &out_dir)
        }
        Command::Evaluate {
            reference,
            candidate,
            method,
            ratio,
            diagnostics,
            overrides,
            out_dir,
        } => {
            let c = scenario(&overrides, None)?;
            let args = commands::EvaluateArgs {
                reference: &reference,
                candidate: &candidate,
                method: &method,
                ratio,
                diagnostics: diagnostics.as_deref(),
            };
            commands::evaluate(&args, &c, &out_dir)
        }
        Command::Pipeline {
            truth,
            snr_sweep,
            overrides,
            out_dir,
        } => {
            let mut c = scenario(&overrides, truth.synthetic)?;
            if snr_sweep.is_some() {
                c.snr_sweep = snr_sweep;
            }
            commands::pipeline(truth.truth.as_deref(), &c, &out_dir)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CliError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<FusionError>() {
        Some(e) if e.is_numerical() => 3,
        Some(FusionError::Degenerate(_)) => 3,
        Some(FusionError::Io(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
