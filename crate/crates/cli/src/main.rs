//! `drgrade`: train, evaluate, and explain retinal fundus grading
//! models from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use drgrade_core::error::Error;

use commands::{ExplainArgs, Overrides};

#[derive(Parser)]
#[command(name = "drgrade", version, about = "Retinal fundus grading pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoints, history, and a run manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write SVG loss/accuracy curves.
        #[arg(long)]
        emit_svg: bool,
        /// Check a small parameter subset against finite differences
        /// before training.
        #[arg(long)]
        verify_grads: bool,
    },
    /// Score a checkpoint on one dataset split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a Grad-CAM overlay, heatmap CSV, and membership report
    /// for one image.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Apply this config's preprocessing and class names; without
        /// it the image is only resized.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        /// "refined" (post-attention) or "backbone".
        #[arg(long, default_value = "refined")]
        layer: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write each preprocessing stage of one image.
    Preview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic labeled dataset in APTOS layout.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a config file with every default spelled out.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and metric self-check suites.
    Verify {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Train { config, seed, epochs, out, emit_svg, verify_grads } => {
            let cfg = commands::load_config(&config, &Overrides { seed, epochs, out })?;
            commands::cmd_train(&cfg, verify_grads, emit_svg)
        }
        Cmd::Evaluate { config, checkpoint, split, seed, out } => {
            let cfg = commands::load_config(&config, &Overrides { seed, epochs: None, out })?;
            commands::cmd_evaluate(&cfg, &checkpoint, &split)
        }
        Cmd::Explain { checkpoint, image, config, class, layer, out, seed } => {
            commands::cmd_explain(&ExplainArgs { checkpoint, image, config, class, layer, out }, seed)
        }
        Cmd::Preview { config, image, out, seed } => {
            let cfg = commands::load_config(&config, &Overrides { seed, epochs: None, out: None })?;
            commands::cmd_preview(&cfg, &image, &out)
        }
        Cmd::Synth { config, out, seed } => {
            let cfg = commands::load_config(&config, &Overrides { seed, epochs: None, out: None })?;
            commands::cmd_synth(&cfg, &out)
        }
        Cmd::InitConfig { out } => commands::cmd_init_config(&out),
        Cmd::Verify { seed } => commands::cmd_verify(seed),
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Shape(_) | Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
