//! `grape` — experiment driver for the perturbation-embedding GAN.
//!
//! Subcommands cover the full pipeline: dataset synthesis, preprocessing,
//! training, embedding extraction, evaluation, k-sweeps and baseline
//! ingestion. Exit codes: 0 success, 2 usage error, 1 runtime failure.

mod commands;
mod config;
mod figure;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use commands::ExtractArgs;
use config::Effective;
use grape_core::embeddings::Position3Mode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "grape", version, about = "Perturbation-embedding GAN experiments")]
struct Cli {
    /// TOML config file overriding preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for all randomness in the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Configuration preset: desk | paper.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with known gene -> complex structure.
    Synth {
        /// Overwrite an existing dataset directory.
        #[arg(long)]
        force: bool,
    },
    /// Flatfield-correct, rescale and z-score a dataset.
    Preprocess {
        /// Input (raw) dataset directory.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the GAN, writing checkpoints and a loss log.
    Train {
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override total iterations.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Extract gene embedding tables from a checkpoint.
    Extract(ExtractCli),
    /// Score embedding tables against the dataset's complex ground truth.
    Eval {
        /// Dataset directory (ground truth source).
        #[arg(long)]
        data: PathBuf,
        /// Embedding table(s) to score; repeat to compare.
        #[arg(long, required = true)]
        table: Vec<PathBuf>,
        /// Number of clusters (default: true number of complexes).
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 100)]
        restarts: usize,
    },
    /// Clustering metrics across a range of k, with a rendered figure.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        k_min: usize,
        #[arg(long)]
        k_max: usize,
        #[arg(long, default_value_t = 100)]
        restarts: usize,
    },
    /// Validate and register an externally produced embedding table.
    Ingest {
        #[arg(long)]
        table: PathBuf,
        /// Optional dataset directory to check gene names against.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ExtractCli {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Network positions to extract (1 = embedding rows, 2 = style codes,
    /// 3 = aggregated per-cell codes).
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u8, 2, 3])]
    positions: Vec<u8>,
    /// Extract from live parameters.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    live: bool,
    /// Extract from EMA parameters.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    ema: bool,
    /// Position-3 aggregation source: real | transferred.
    #[arg(long, default_value = "real")]
    mode: String,
    /// Cells sampled per gene for position 3.
    #[arg(long, default_value_t = 500)]
    cells_per_gene: usize,
}

/// Errors that indicate misuse of the CLI rather than a runtime failure.
fn is_usage_error(err: &anyhow::Error) -> bool {
    let msg = format!("{err}");
    msg.starts_with("unknown preset")
        || msg.starts_with("empty or invalid k range")
        || msg.starts_with("nothing to extract")
        || msg.starts_with("unknown extraction position")
        || msg.starts_with("unknown position-3 mode")
        || msg.starts_with("eval needs at least one")
        || msg.contains("parsing config file")
}

fn run(cli: Cli) -> Result<()> {
    let mut eff = Effective::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        let file = config::load_file(path)?;
        config::apply_file(&mut eff, &file)?;
    }
    let seed = cli.seed.unwrap_or(eff.train.seed);
    eff.train.seed = seed;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    match &cli.command {
        Command::Synth { force } => commands::cmd_synth(&eff, seed, &out, *force),
        Command::Preprocess { input } => commands::cmd_preprocess(&eff, seed, input, &out),
        Command::Train { data, resume, iters } => {
            if let Some(n) = iters {
                eff.train.total_iters = *n;
            }
            commands::cmd_train(&eff, seed, data, &out, resume.as_deref())
        }
        Command::Extract(e) => {
            let mode = match e.mode.as_str() {
                "real" => Position3Mode::Real,
                "transferred" => Position3Mode::Transferred,
                other => anyhow::bail!("unknown position-3 mode {other:?}"),
            };
            commands::cmd_extract(
                &eff,
                seed,
                &out,
                &ExtractArgs {
                    checkpoint: &e.checkpoint,
                    data: &e.data,
                    positions: e.positions.clone(),
                    live: e.live,
                    ema: e.ema,
                    mode,
                    cells_per_gene: e.cells_per_gene,
                },
            )
        }
        Command::Eval { data, table, k, restarts } => {
            commands::cmd_eval(&eff, seed, &out, data, table, *k, *restarts)
        }
        Command::Sweep { data, table, k_min, k_max, restarts } => {
            commands::cmd_sweep(&eff, seed, &out, data, table, *k_min, *k_max, *restarts)
        }
        Command::Ingest { table, data } => {
            commands::cmd_ingest(&eff, seed, &out, table, data.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
