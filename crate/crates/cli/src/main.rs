//! `rgmm`: batch front end for training, prediction and evaluation of the
//! two-stage CT-from-MR estimator.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::EXIT_USAGE;

#[derive(Debug, Parser)]
#[command(name = "rgmm", version, about = "CT estimation from MR volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration sources. Later sources win: config file, then `--set`,
/// then the dedicated flags.
#[derive(Debug, Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long, env = "RGMM_CONFIG")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// CT threshold in HU separating bone from soft tissue.
    #[arg(long)]
    threshold_hu: Option<f64>,
    /// `first` (6 neighbors) or `second` (26 neighbors).
    #[arg(long)]
    neighborhood: Option<String>,
    /// Boosting rounds.
    #[arg(long)]
    n_learners: Option<usize>,
    /// Worker threads; 0 uses all cores. Outputs do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cohort from known per-class models.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        patients: usize,
        /// Volume dimensions as `nx,ny,nz`.
        #[arg(long, default_value = "32,32,32")]
        dims: String,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long)]
        minority_fraction: Option<f64>,
        #[arg(long)]
        noise_scale: Option<f64>,
        #[arg(long)]
        smoothing_sigma: Option<f64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a model bundle on a cohort.
    Train {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Estimate CT for one subject from its MR channels.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Directory holding `mr0.vhdr ..` and optionally `mask.vhdr`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Leave-one-patient-out evaluation of the full pipeline.
    Evaluate {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// True per-class models (`truth.gmm` from `phantom`) for an oracle baseline.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Voxel-level k-fold cross-validation of the tissue classifier.
    CvClassifier {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rgmm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
