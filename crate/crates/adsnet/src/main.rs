use adsnet::cli;
use adsnet::config::load_config;
use adsnet::trainer::Variant;
use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "adsnet",
    version,
    about = "Cross-domain LTV model: synthetic data, training, evaluation, benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset (train/validation/test CSVs)
    Datagen {
        /// Config file (flat `key = value` text)
        #[arg(long)]
        config: PathBuf,
        /// Directory to write train.csv, validation.csv, test.csv
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one variant and write its step log and checkpoint
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Read CSVs from this directory instead of generating from config
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Directory for metrics.csv and model.ckpt
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the first entry of run.seeds
        #[arg(long)]
        seed: Option<u64>,
        /// Override the first entry of run.variants
        #[arg(long)]
        variant: Option<String>,
    },
    /// Score test.csv with a checkpoint and write report.csv
    Eval {
        /// Checkpoint produced by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding test.csv
        #[arg(long)]
        data_dir: PathBuf,
        /// Directory for report.csv
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train every configured (variant, seed) pair and tabulate results
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Directory for bench_report.csv and per-run logs
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("ADSNET_LOG_LEVEL") {
        Ok(v) => {
            if !["error", "info", "debug"].contains(&v.as_str()) {
                bail!("ADSNET_LOG_LEVEL must be one of error, info, debug (got `{v}`)");
            }
            v
        }
        Err(std::env::VarError::NotPresent) => "info".to_string(),
        Err(e) => return Err(e).context("reading ADSNET_LOG_LEVEL"),
    };
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn parse_variant(s: &str) -> Result<Variant> {
    Variant::parse(s).with_context(|| {
        let names: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        format!("unknown variant `{s}`, expected one of: {}", names.join(", "))
    })
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    init_logging()?;
    match cli.command {
        Command::Datagen { config, out_dir } => {
            let cfg = load_config(&config)?;
            cli::cmd_datagen(&cfg, &out_dir)
        }
        Command::Train { config, data_dir, out_dir, seed, variant } => {
            let cfg = load_config(&config)?;
            let variant = variant.as_deref().map(parse_variant).transpose()?;
            cli::cmd_train(&cfg, data_dir.as_deref(), &out_dir, seed, variant)
        }
        Command::Eval { checkpoint, data_dir, out_dir } => {
            cli::cmd_eval(&checkpoint, &data_dir, &out_dir)
        }
        Command::Bench { config, data_dir, out_dir } => {
            let cfg = load_config(&config)?;
            cli::cmd_bench(&cfg, data_dir.as_deref(), &out_dir)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
