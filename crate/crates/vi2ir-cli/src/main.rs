//! Command-line frontend: train, translate, evaluate, eval-detections,
//! gen-synthetic. Exit codes: 0 success, 1 user/config error, 2 runtime
//! abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vi2ir::data::{Direction, Split};

#[derive(Parser)]
#[command(name = "vi2ir", version, about = "Visible-to-infrared translation pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the two-stage training schedule from a TOML config.
    Train {
        /// Path to the run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Continue from a snapshot instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate a directory of images with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Flat directory of PNGs to translate.
        #[arg(long, conflicts_with = "dataset")]
        input: Option<PathBuf>,
        /// Paired-dataset root: exports the detector layout (images, labels,
        /// manifest), skipping samples without labels.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Dataset split when --dataset is used.
        #[arg(long, default_value = "train")]
        split: String,
        /// Mapping direction when --dataset is used.
        #[arg(long, default_value = "visible_to_infrared")]
        direction: String,
        #[arg(long)]
        output: PathBuf,
        /// Super-resolution checkpoint; doubles output dimensions.
        #[arg(long)]
        superres: Option<PathBuf>,
    },
    /// Mean SSIM/PSNR between two directories of equally named images.
    Evaluate {
        #[arg(long)]
        generated: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Report file (JSON).
        #[arg(long, default_value = "metrics_report.json")]
        out: PathBuf,
    },
    /// VOC-style mAP over serialized detections.
    EvalDetections {
        /// Directory of per-image prediction files (class cx cy w h score).
        #[arg(long)]
        predictions: PathBuf,
        /// Directory of per-image ground-truth files (class cx cy w h).
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, default_value = "detection_report.json")]
        out: PathBuf,
    },
    /// Write a seeded synthetic paired dataset.
    GenSynthetic {
        /// Optional config providing the [synthesis] recipe.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Override the recipe seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn parse_split(s: &str) -> vi2ir::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(vi2ir::Error::Config {
            field: "split".into(),
            reason: format!("unknown value '{other}' (expected \"train\" or \"test\")"),
        }),
    }
}

fn parse_direction(s: &str) -> vi2ir::Result<Direction> {
    match s {
        "visible_to_infrared" => Ok(Direction::VisibleToInfrared),
        "infrared_to_visible" => Ok(Direction::InfraredToVisible),
        other => Err(vi2ir::Error::Config {
            field: "direction".into(),
            reason: format!(
                "unknown value '{other}' (expected \"visible_to_infrared\" or \"infrared_to_visible\")"
            ),
        }),
    }
}

fn run(cli: Cli) -> vi2ir::Result<()> {
    match cli.cmd {
        Cmd::Train { config, resume } => commands::cmd_train(&config, resume.as_deref()),
        Cmd::Translate {
            checkpoint,
            input,
            dataset,
            split,
            direction,
            output,
            superres,
        } => commands::cmd_translate(commands::TranslateArgs {
            checkpoint: &checkpoint,
            input: input.as_deref(),
            dataset: dataset.as_deref(),
            split: parse_split(&split)?,
            direction: parse_direction(&direction)?,
            output: &output,
            superres: superres.as_deref(),
        }),
        Cmd::Evaluate {
            generated,
            reference,
            out,
        } => commands::cmd_evaluate(&generated, &reference, &out),
        Cmd::EvalDetections {
            predictions,
            ground_truth,
            iou,
            out,
        } => commands::cmd_eval_detections(&predictions, &ground_truth, iou, &out),
        Cmd::GenSynthetic {
            config,
            out,
            count,
            seed,
            split,
        } => commands::cmd_gen_synthetic(config.as_deref(), &out, count, seed, parse_split(&split)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
