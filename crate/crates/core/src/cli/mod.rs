mod commands;
mod run_dir;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use itportrait::inversion::PoseInitMode;

#[derive(Debug, Parser)]
#[command(
    name = "itportrait",
    version,
    about = "One-shot 3D portrait stylization from a style image and a text prompt"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML configuration file. Omitted keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set fusion.tau=0.6`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SampleKind {
    Artistic,
    Photo,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Invert a style image into a latent code and camera pose.
    Invert {
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from a seeded random pose instead of estimating one.
        #[arg(long)]
        no_pose_init: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run alternating training from an inversion.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Directory written by `invert`.
        #[arg(long, conflicts_with = "style")]
        inversion: Option<PathBuf>,
        /// Style image to invert first, into `<out>/inversion`.
        #[arg(long)]
        style: Option<PathBuf>,
        /// Continue from the newest checkpoint in `<out>`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
        /// Target text prompt.
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        no_pose_init: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render trained generators over a yaw sweep.
    Render {
        /// A checkpoint directory, or a run directory (newest checkpoint).
        #[arg(long)]
        checkpoint: PathBuf,
        /// `start:end:step` in degrees, end inclusive.
        #[arg(long, allow_hyphen_values = true)]
        yaw_sweep: String,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        pitch: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a finished training run.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Report directory; defaults to `<run>/eval`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic style image from the toy backend.
    ToySample {
        #[arg(long, value_enum, default_value = "artistic")]
        kind: SampleKind,
        #[arg(long, default_value_t = 1)]
        case: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn pose_mode(no_pose_init: bool) -> PoseInitMode {
    if no_pose_init {
        PoseInitMode::Random
    } else {
        PoseInitMode::Estimate
    }
}

pub fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Invert {
            style,
            out,
            no_pose_init,
            cfg,
        } => commands::invert(&style, &out, pose_mode(no_pose_init), &cfg),
        Command::Train {
            out,
            inversion,
            style,
            resume,
            epochs,
            text,
            no_pose_init,
            mut cfg,
        } => {
            if let Some(e) = epochs {
                cfg.set.push(format!("train.epochs={e}"));
            }
            if let Some(t) = text {
                cfg.set
                    .push(format!("fusion.target_text={}", toml::Value::String(t)));
            }
            let source = match (inversion, style) {
                (Some(dir), _) => commands::TrainSource::Inversion(dir),
                (None, Some(img)) => commands::TrainSource::Style(img, pose_mode(no_pose_init)),
                (None, None) => commands::TrainSource::None,
            };
            commands::train(&out, source, resume, &cfg)
        }
        Command::Render {
            checkpoint,
            yaw_sweep,
            pitch,
            out,
        } => commands::render(&checkpoint, &yaw_sweep, pitch, &out),
        Command::Eval { run, out } => commands::eval(&run, out.as_deref()),
        Command::ToySample {
            kind,
            case,
            out,
            cfg,
        } => commands::toy_sample(kind, case, &out, &cfg),
    }
}
