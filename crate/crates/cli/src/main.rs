//! `eviscreen` command-line pipelines.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eviscreen::contrastive::Pooling;
use eviscreen::{Error, Result};

use commands::Study;
use config::{Overrides, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "eviscreen", version, about = "Dual knowledge-bank screening pipelines")]
struct Cli {
    /// JSON pipeline config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Coreset subsample ratio in (0, 1].
    #[arg(long, global = true)]
    ratio: Option<f64>,
    /// max, mean or topk:T
    #[arg(long, global = true)]
    pool: Option<Pooling>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Recall levels, e.g. 95,99,100
    #[arg(long = "spe-at", global = true, value_delimiter = ',')]
    spe_at: Option<Vec<f64>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset (EVFM files and manifest.txt).
    Synth,
    /// Build the normal and pathological banks from a labeled manifest.
    BuildBank {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score every case of a manifest.
    Screen {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Write one abnormality map CSV per case under maps/.
        #[arg(long)]
        emit_maps: bool,
        /// Score with a trained reasoning checkpoint instead of the contrastive rule.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the reasoning head on a labeled manifest.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Checkpoint path (default: <out>/model.evrp).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compute metrics for a scores CSV.
    Eval {
        #[arg(long)]
        scores: PathBuf,
    },
    /// Run a benchmark study on a manifest or on the configured synthetic data.
    Study {
        #[arg(value_enum)]
        which: Study,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Bank sizes for the scaling study, e.g. 50,200,1000
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("EVISCREEN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("EVISCREEN_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot start {n} worker threads: {e}")))
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    let (manifest, checkpoint) = match &cli.command {
        Command::BuildBank { manifest } | Command::Study { manifest, .. } => (manifest.clone(), None),
        Command::Screen { manifest, checkpoint, .. } | Command::Train { manifest, checkpoint } => {
            (manifest.clone(), checkpoint.clone())
        }
        _ => (None, None),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        k: cli.k,
        ratio: cli.ratio,
        pool: cli.pool,
        out: cli.out,
        spe_at: cli.spe_at,
        manifest,
        checkpoint,
    });
    cfg.validate()?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::BuildBank { .. } => commands::build_bank(&cfg),
        Command::Screen { emit_maps, checkpoint, .. } => commands::screen(&cfg, emit_maps, checkpoint.is_some()),
        Command::Train { .. } => commands::train_cmd(&cfg),
        Command::Eval { scores } => commands::eval(&cfg, &scores),
        Command::Study { which, sizes, .. } => commands::study(&cfg, which, sizes),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
