use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dyjr::config::TrainConfig;
use dyjr::error::Result;
use dyjr::{report, trainer};

#[derive(Parser)]
#[command(name = "dyjr", version, about = "Replay-regularized GRPO laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training job and write metrics.jsonl plus a final checkpoint.
    Train {
        /// JSON experiment configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: out).
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Dotted-path config overrides, e.g. --override regularizer.alpha=0.2
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint on the config's held-out queries.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a JSONL metrics log to CSV.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)?;
    TrainConfig::from_json_with_overrides(&text, overrides, seed)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides, seed)?;
            let steps = cfg.total_steps;
            trainer::train(cfg, &out)?;
            eprintln!(
                "trained {steps} steps; wrote {} and {}",
                out.join("metrics.jsonl").display(),
                out.join("checkpoint.json").display()
            );
        }
        Command::Eval { checkpoint, config } => {
            let cfg = load_config(&config, &[], None)?;
            let (params, step) = trainer::load_params(&checkpoint, &cfg)?;
            let metrics = trainer::evaluate(&params, &cfg)?;
            let payload = serde_json::json!({
                "step": step,
                "pass1": metrics.pass1,
                "pass16": metrics.pass16,
                "mean_reward": metrics.mean_reward,
                "distinct_correct_mean": metrics.distinct_correct_mean,
            });
            println!("{payload}");
        }
        Command::Report { log, out } => {
            report::report(&log, &out)?;
            eprintln!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
