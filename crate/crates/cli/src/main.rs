//! `lit`: generate data, train and evaluate ensembles, run hyperparameter
//! grids and export plot-ready CSVs.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 when a run fails.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod artifacts;
mod commands;
mod config;

use commands::{Bounds, DataArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Run(_) => 3,
        }
    }
}

impl From<lit_core::Error> for CliError {
    fn from(e: lit_core::Error) -> Self {
        match e {
            lit_core::Error::Config(m) => CliError::Config(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "lit", version, about = "Locally independent ensembles and their baselines")]
struct Cli {
    /// Seed; overrides the seeds in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML config for `train` and `grid`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct DataFlags {
    /// CSV to score.
    #[arg(long)]
    data: PathBuf,
    /// Label column.
    #[arg(long, default_value = "label")]
    label: String,
    /// Label value of the positive class; otherwise labels must be 0/1.
    #[arg(long)]
    positive: Option<String>,
    /// Manifold embedding file; defaults to `<data>.embedding.txt` if present.
    #[arg(long)]
    embedding: Option<PathBuf>,
}

impl From<DataFlags> for DataArgs {
    fn from(f: DataFlags) -> Self {
        DataArgs { path: f.data, label: f.label, positive: f.positive, embedding: f.embedding }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    GenData {
        /// D1, D2, D3 or manifold3d.
        #[arg(long)]
        variant: String,
        #[arg(short, long, default_value_t = 400)]
        n: usize,
        /// Blob standard deviation for D1 and D3.
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
    },
    /// Train one ensemble and write its artifacts.
    Train,
    /// Run a hyperparameter grid; resumes from existing results.
    Grid,
    /// Score a trained ensemble on a CSV.
    Eval {
        /// Directory written by `train`.
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataFlags,
        /// Name recorded as the evaluation set.
        #[arg(long, default_value = "eval")]
        set: String,
    },
    /// Member logits and ensemble probability over a 2D grid.
    ExportBoundary {
        #[arg(long)]
        model: PathBuf,
        /// x1_lo,x1_hi,x2_lo,x2_hi
        #[arg(long, default_value = "-2,2,-2,2", allow_hyphen_values = true)]
        bounds: Bounds,
        #[arg(long, default_value_t = 100)]
        resolution: usize,
    },
    /// Per-member input gradients for every example and feature.
    ExportGradients {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataFlags,
    },
}

fn need<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("this command needs --{flag}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { variant, n, noise } => {
            commands::gen_data(&variant, n, noise, cli.seed.unwrap_or(0), need(&cli.out, "out")?)
        }
        Command::Train => {
            let dir = commands::train_cmd(need(&cli.config, "config")?, cli.seed, cli.out.as_deref())?;
            log::info!("artifacts in {}", dir.display());
            Ok(())
        }
        Command::Grid => {
            let o = commands::grid_cmd(need(&cli.config, "config")?, cli.seed, cli.out.as_deref())?;
            log::info!("{} runs executed; results in {}", o.executed, o.dir.display());
            for row in &o.selection {
                println!(
                    "{} {} {}: M={} λ={} test AUC {}",
                    row.dataset,
                    row.split,
                    row.method,
                    row.size,
                    row.lambda.map_or("-".into(), |l| format!("{l:e}")),
                    row.test_auc_mean.map_or("null".into(), |a| format!("{a:.4}"))
                );
            }
            if o.failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Run(format!("{} runs failed: {}", o.failed.len(), o.failed.join(", "))))
            }
        }
        Command::Eval { model, data, set } => commands::eval_cmd(&model, &data.into(), &set, cli.out.as_deref()),
        Command::ExportBoundary { model, bounds, resolution } => {
            commands::export_boundary(&model, bounds, resolution, need(&cli.out, "out")?)
        }
        Command::ExportGradients { model, data } => {
            commands::export_gradients(&model, &data.into(), need(&cli.out, "out")?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
