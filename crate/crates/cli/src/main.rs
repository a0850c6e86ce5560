//! `dinoiser` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage errors.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dinoiser_core::denoiser::pipeline::PoolingSource;
use dinoiser_core::eval::DatasetKind;

#[derive(Debug, Parser)]
#[command(name = "dinoiser", version, about = "Open-vocabulary semantic segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single-threaded, bit-reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// CLIP weights (safetensors).
    #[arg(long, global = true)]
    weights: Option<PathBuf>,
    /// Tokenizer definition for the CLIP text tower.
    #[arg(long, global = true)]
    tokenizer: Option<PathBuf>,
    /// Trained heads.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// DINO teacher weights. For segment and eval this selects teacher pooling.
    #[arg(long, global = true)]
    teacher: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
struct PipelineFlags {
    /// Affinity threshold.
    #[arg(long)]
    gamma: Option<f64>,
    /// Confidence threshold of the background gate.
    #[arg(long)]
    delta: Option<f64>,
    /// Disable background refinement.
    #[arg(long)]
    no_background: bool,
    /// Plain dense CLIP matching: no pooling, no background refinement.
    #[arg(long)]
    baseline_maskclip: bool,
    #[arg(long, value_parser = parse_pooling)]
    pooling: Option<PoolingSource>,
}

fn parse_pooling(s: &str) -> Result<PoolingSource, String> {
    match s {
        "none" => Ok(PoolingSource::None),
        "teacher" => Ok(PoolingSource::Teacher),
        "learned" => Ok(PoolingSource::Learned),
        _ => Err(format!("expected none, teacher or learned, got `{s}`")),
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Segment images against text prompts.
    Segment {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        /// Comma-separated prompts, e.g. "cat,dog,background".
        #[arg(long, conflicts_with = "prompt_file")]
        prompts: Option<String>,
        /// One prompt per line.
        #[arg(long)]
        prompt_file: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Train the affinity and objectness heads.
    Train {
        /// Dataset root with images/ and <split>.txt.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        /// Directory of teacher objectness masks named <id>.png.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate mIoU on a dataset.
    Eval {
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Write trained heads as a portable f32 container.
    Export {
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
