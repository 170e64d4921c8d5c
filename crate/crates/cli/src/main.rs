mod commands;
mod record;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use slicewise::adapt::{MmdMode, Phase};

/// Orientation-aware domain adaptation pipeline for 3-class slice
/// classification.
#[derive(Debug, Parser)]
#[command(name = "slicewise", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic two-domain dataset (PNG slices + manifest.csv).
    Synth {
        /// Generator config (key = value); defaults apply to absent keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train (or load) the orientation separator, predict every entry and
    /// write one manifest per predicted orientation.
    Separate {
        #[arg(long)]
        manifest: PathBuf,
        /// Existing separator checkpoint; when given, no training happens.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Separator training config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Phase 1, pseudo-labeling and Phase 2 for each orientation partition.
    Adapt {
        /// Directory holding axial.csv, sagittal.csv and coronal.csv.
        #[arg(long)]
        partitions: PathBuf,
        /// Adaptation config covering every tunable field.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_mode)]
        mmd_mode: Option<MmdMode>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Backbone safetensors file; the built-in stand-in is used otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Score adapted (or Phase 1) checkpoints on labeled target entries.
    Eval {
        /// Output directory of `adapt`.
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        partitions: PathBuf,
        /// Optional `phase` and `seed` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to score: phase1 or phase2 (default).
        #[arg(long, value_parser = parse_phase)]
        phase: Option<Phase>,
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Seed of the 2-D embedding (default 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the stand-in backbone weights to a safetensors file.
    InitBackbone {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<MmdMode, String> {
    s.parse().map_err(|e: slicewise::Error| e.to_string())
}

fn parse_phase(s: &str) -> Result<Phase, String> {
    s.parse().map_err(|e: slicewise::Error| e.to_string())
}

/// Exit status: 0 success, 1 internal error, 2 user or config error.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<slicewise::Error>() {
        Some(e) => {
            use slicewise::Error::*;
            match e {
                NonFinite(_) | ShapeMismatch(_) => 1,
                Io { .. }
                | Image { .. }
                | Parse { .. }
                | UnknownToken { .. }
                | DuplicateId(_)
                | TallyMismatch { .. }
                | Config(_)
                | InvalidInput(_)
                | MissingLabel(_)
                | MissingPrediction(_)
                | EmptyStream(_)
                | Weights(_)
                | Checkpoint(_) => 2,
            }
        }
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, seed } => commands::synth(config.as_deref(), &out, seed),
        Command::Separate {
            manifest,
            checkpoint,
            config,
            out,
            seed,
        } => commands::separate(
            &manifest,
            checkpoint.as_deref(),
            config.as_deref(),
            &out,
            seed,
        ),
        Command::Adapt {
            partitions,
            config,
            out,
            seed,
            mmd_mode,
            lambda,
            weights,
        } => commands::adapt(commands::AdaptArgs {
            partitions: &partitions,
            config: config.as_deref(),
            out: &out,
            seed,
            mmd_mode,
            lambda,
            weights: weights.as_deref(),
        }),
        Command::Eval {
            checkpoints,
            partitions,
            config,
            out,
            phase,
            weights,
            seed,
        } => commands::eval(
            &checkpoints,
            &partitions,
            config.as_deref(),
            &out,
            phase,
            weights.as_deref(),
            seed,
        ),
        Command::InitBackbone { out, seed } => commands::init_backbone(&out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
