//! `deep-glr`: generate phantoms, train, reconstruct and evaluate.
//!
//! Exit codes: 0 success, 2 validation error, 3 IO or integrity error.

mod commands;
mod config;
mod images;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deep_glr::pfbs::{CnnRefresh, ResidualMode};

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "deep-glr", version, about = "Low-dose CT reconstruction with learned graph regularization")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run-config JSON; defaults apply to every missing field.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-sample work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Override the number of unrolled iterations.
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub residual_mode: Option<ResidualArg>,
    #[arg(long, global = true, value_enum)]
    pub cnn_refresh: Option<RefreshArg>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum ResidualArg {
    Convex,
    Literal,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum RefreshArg {
    PerIteration,
    PerLayer,
}

impl From<ResidualArg> for ResidualMode {
    fn from(a: ResidualArg) -> Self {
        match a {
            ResidualArg::Convex => ResidualMode::Convex,
            ResidualArg::Literal => ResidualMode::Literal,
        }
    }
}

impl From<RefreshArg> for CnnRefresh {
    fn from(a: RefreshArg) -> Self {
        match a {
            RefreshArg::PerIteration => CnnRefresh::PerIteration,
            RefreshArg::PerLayer => CnnRefresh::PerLayer,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate phantoms and low-dose sinograms into a dataset file.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples (config `data.count` if absent).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the model; writes a checkpoint, `<out>.history.csv` and
    /// `<out>.summary.json`.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reconstruct every sample; writes fbp.pgm, glr.pgm, trace.csv and raw
    /// f64 images into one directory per sample.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-sample PSNR/SSIM/MSE and aggregates for FBP and the model.
    Evaluate {
        #[arg(long)]
        dataset: PathBuf,
        /// Directory written by `reconstruct`.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        recon_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective config, the parameter budget, and optionally the
    /// headers of a dataset or checkpoint.
    Info {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GLR_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::load_config(&cli.global).and_then(|cfg| match cli.command {
        Command::Generate { out, count } => commands::generate(&cfg, &out, count),
        Command::Train {
            train,
            val,
            out,
            resume,
        } => commands::train(&cfg, &train, &val, &out, resume.as_deref()),
        Command::Reconstruct {
            checkpoint,
            dataset,
            out,
        } => commands::reconstruct(&cfg, &cli.global, &checkpoint, &dataset, &out),
        Command::Evaluate {
            dataset,
            recon_dir,
            checkpoint,
            out,
        } => commands::evaluate(
            &cfg,
            &cli.global,
            &dataset,
            recon_dir.as_deref(),
            checkpoint.as_deref(),
            &out,
        ),
        Command::Info {
            dataset,
            checkpoint,
        } => commands::info(&cfg, dataset.as_deref(), checkpoint.as_deref()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
