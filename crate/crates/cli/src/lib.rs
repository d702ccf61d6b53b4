//! `medkan` command-line driver.
//!
//! ```text
//! medkan <train|eval|gradcheck|bench|gradcam|make-synth>
//!        [--config F] [--data F] [--ckpt F] [--out D]
//!        [--threads N] [--runs R] [--seed S]
//! ```
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
//! 3 data error, 4 runtime error. Every failure writes one
//! `error_code=<n> kind=<k> message="..."` line to stderr.

pub mod bench;
mod commands;
pub mod config;
pub mod exit;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{gradcheck_exit_code, gradcheck_report, resolve_threads, summary_stats};
pub use config::RunConfig;
pub use exit::{CliError, CliResult, ExitClass};

#[derive(Debug, Parser)]
#[command(name = "medkan", version, about = "MedKAN training, evaluation and benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config (RunConfig for train, SynthConfig for make-synth).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset archive (.npz).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Checkpoint file.
    #[arg(long, global = true)]
    pub ckpt: Option<PathBuf>,
    /// Output directory (train, bench) or file (make-synth, gradcam).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; falls back to MEDKAN_THREADS, then the hardware.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train with early stopping; writes metrics.csv, best.ckpt, final.ckpt
    /// and config.echo.json.
    Train,
    /// Evaluate a checkpoint; prints {acc, auc, loss, n} as JSON.
    Eval {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        /// Also write `index,label,logit_0,...` rows to this CSV file.
        #[arg(long)]
        dump_logits: Option<PathBuf>,
    },
    /// Run every registered finite-difference gradient check (f64).
    Gradcheck,
    /// RBF vs B-spline KANLinear timing sweep; CSV on stdout.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [4, 8, 16])]
        ks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 256])]
        widths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [64, 1024])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long, default_value_t = 30)]
        iters: usize,
    },
    /// Grad-CAM heatmap of one image; writes <out>.ppm and <out>.f32.
    Gradcam {
        #[arg(long)]
        index: usize,
        /// Target class; defaults to the predicted class.
        #[arg(long)]
        class: Option<usize>,
        /// Stage output (`stage0`, `stage1`, ...); defaults to the last.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a synthetic blob dataset as .npz.
    MakeSynth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        /// Square image side.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match commands::dispatch(cli) {
        Ok(class) => class.code(),
        Err(e) => {
            eprintln!("{}", e.line());
            e.class.code()
        }
    }
}
