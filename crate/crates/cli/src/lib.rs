//! Config-driven experiment runner: `generate`, `train`, `eval`, `predict`.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{CliError, CliResult, Prepared};
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "naeb", version, about = "Variational empirical Bayes with hypernetwork priors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset as CSV.
    Generate(CommonArgs),
    /// Fit one model per split and write checkpoints and traces.
    Train(CommonArgs),
    /// Compute metrics of trained checkpoints (metrics.json).
    Eval(CheckpointArgs),
    /// Predictive means and credible intervals at new inputs.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Directory written by `train`; defaults to `--out`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub ckpt: CheckpointArgs,
    /// Which split's checkpoint to use.
    #[arg(long, default_value_t = 0)]
    pub split: usize,
}

fn load_config(args: &CommonArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config).map_err(CliError::Config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(a) => {
            let cfg = load_config(&a)?;
            commands::cmd_generate(&cfg, &a.out)?;
        }
        Command::Train(a) => {
            let prep = commands::prepare(&load_config(&a)?)?;
            commands::cmd_train(&prep, &a.out)?;
        }
        Command::Eval(a) => {
            let prep = commands::prepare(&load_config(&a.common)?)?;
            let ckpt = a.checkpoint.as_ref().unwrap_or(&a.common.out);
            commands::cmd_eval(&prep, ckpt, &a.common.out)?;
        }
        Command::Predict(a) => {
            let common = &a.ckpt.common;
            let prep = commands::prepare(&load_config(common)?)?;
            let ckpt = a.ckpt.checkpoint.as_ref().unwrap_or(&common.out);
            commands::cmd_predict(&prep, ckpt, a.split, &common.out)?;
        }
    }
    Ok(())
}
