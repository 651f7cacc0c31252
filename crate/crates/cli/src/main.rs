mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "nmsparse",
    version,
    about = "Learn, apply and analyze 2:4 sparsity masks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct DataArgs {
    #[arg(long)]
    pub dataset_images: PathBuf,
    #[arg(long)]
    pub dataset_labels: PathBuf,
    /// Pixel normalisation `(x / 255 - mean) / std`.
    #[arg(long, default_value_t = 0.1307)]
    pub mean: f64,
    #[arg(long, default_value_t = 0.3081)]
    pub std: f64,
    /// Use only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Dense,
    Soft,
    Hard,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FreezeArg {
    Deterministic,
    Stochastic,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a synthetic seven-segment digit dataset as IDX files.
    Synth {
        #[arg(long)]
        out_images: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 12)]
        side: usize,
        #[arg(long, default_value_t = 60)]
        noise: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a small dense conv classifier and save it.
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Output channels of the two conv layers.
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16])]
        channels: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Learn 2:4 masks for the conv layers with the weights frozen.
    TrainMask {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Mask file to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch history records.
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        epochs: usize,
        #[arg(long, default_value_t = 1.0)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        tau: f64,
        /// Exponential temperature anneal as `start,end`; overrides --tau.
        #[arg(long, value_delimiter = ',')]
        anneal: Option<Vec<f64>>,
        #[arg(long, default_value_t = 1e-4)]
        weight_decay: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Fraction of the data held out for per-epoch accuracy.
        #[arg(long, default_value_t = 0.1)]
        holdout: f64,
        #[arg(long, value_enum, default_value_t = FreezeArg::Deterministic)]
        freeze: FreezeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Top-1/top-5 accuracy of a model, optionally under a mask file.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = EvalMode::Dense)]
        mode: EvalMode,
    },
    /// Magnitude masks with and without column permutation, against random
    /// and (optionally) learned masks.
    PruneMagnitude {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        /// Learned mask file to include in the comparison.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Column-swap pair evaluations per layer.
        #[arg(long, default_value_t = 5000)]
        budget: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the unpermuted magnitude masks here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time dense against 2:4 sparse matrix products.
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        parallel: bool,
        /// Per-repetition records.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lipschitz bounds (lemmas 1-3) or per-sample stability certificates
    /// (lemmas 4-6).
    Certify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=6))]
        lemma: u8,
        /// Layer index, 0-based.
        #[arg(long, default_value_t = 0)]
        layer: usize,
        /// Mask whose induced perturbation is certified (lemmas 2-4).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Model holding the updated weights (lemma 6).
        #[arg(long)]
        update: Option<PathBuf>,
        /// Perturbation norm for lemma 2 when no mask is given.
        #[arg(long)]
        delta_norm: Option<f64>,
        #[arg(long)]
        dataset_images: Option<PathBuf>,
        #[arg(long)]
        dataset_labels: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1307)]
        mean: f64,
        #[arg(long, default_value_t = 0.3081)]
        std: f64,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer pattern histogram and sparsity of a mask file.
    Inspect {
        #[arg(long)]
        mask: PathBuf,
    },
}

fn main() {
    let result = config::expand_config(std::env::args().collect())
        .and_then(|args| commands::run(Cli::parse_from(args).command));
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
