use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pups::app::{self, RunConfig, Split};

#[derive(Parser)]
#[command(name = "pups", version, about = "Point-cloud panoptic segmentation on synthetic street scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); the toy profile when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Command {
    /// Train on generated scenes.
    Train(Common),
    /// Evaluate a checkpoint on generated scenes, or a prediction label file against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "pred", conflicts_with_all = ["pred", "gt"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
    /// Write CutMix-augmented scenes as .bin/.label pairs.
    AugmentPreview {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Write bird's-eye centroids of predicted groups, one CSV per classifier.
    ExportCenters {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "car")]
        class: String,
        #[arg(long, default_value_t = 200)]
        scenes: usize,
        /// Side of the square window around the origin, in meters.
        #[arg(long, default_value_t = 100.0)]
        window: f64,
    },
}

fn load(common: &Common) -> pups::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> pups::Result<()> {
    match cli.command {
        Command::Train(common) => {
            let cfg = load(&common)?;
            let outcome = app::train(&cfg, &common.out)?;
            print!("{}", outcome.report.to_table());
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            pred,
            gt,
        } => {
            let cfg = load(&common)?;
            let report = match (checkpoint, pred, gt) {
                (Some(ckpt), _, _) => {
                    let split = match split {
                        SplitArg::Train => Split::Train,
                        SplitArg::Val => Split::Val,
                    };
                    app::eval_checkpoint(&cfg, &ckpt, split, &common.out)?
                }
                (None, Some(pred), Some(gt)) => app::eval_labels(&cfg, &pred, &gt, &common.out)?,
                _ => unreachable!("enforced by the argument parser"),
            };
            print!("{}", report.to_table());
        }
        Command::AugmentPreview { common, count } => {
            let cfg = load(&common)?;
            print!("{}", app::augment_preview(&cfg, count, &common.out)?.to_text());
        }
        Command::ExportCenters {
            common,
            checkpoint,
            class,
            scenes,
            window,
        } => {
            let cfg = load(&common)?;
            let model = app::load_model(&cfg, &checkpoint)?;
            let centers = app::export_centers(&cfg, &model, scenes, &class, window, &common.out)?;
            println!("{} centers written to {}", centers.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
