use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{LambdaRule, Precision};

/// Flow-prior patch denoising: corpus sampling, training, noise simulation,
/// MAP denoising, baselines and evaluation.
#[derive(Debug, Parser)]
#[command(author, version, about)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a focused patch corpus from a directory of images.
    SamplePatches(SamplePatchesArgs),
    /// Train a flow on a patch corpus.
    Train(TrainArgs),
    /// Add Gaussian, physical speckle or empirical speckle noise.
    Simulate(SimulateArgs),
    /// MAP-denoise an image with a trained flow prior.
    Denoise(DenoiseArgs),
    /// Non-local means baseline.
    Nlm(NlmArgs),
    /// PSNR and SSIM of candidates against a clean reference.
    Evaluate(EvaluateArgs),
    /// Run a full experiment described by a JSON spec.
    RunExperiment(RunExperimentArgs),
    /// Write synthetic textured-blob images.
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Args)]
pub struct SamplePatchesArgs {
    /// Directory of .pgm / .f32r source images.
    #[arg(long)]
    pub images: PathBuf,
    /// Total number of patches.
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub patch: usize,
    /// Fraction of candidates kept by the sharpness filter.
    #[arg(long, default_value_t = 0.25)]
    pub keep_fraction: f64,
    /// Fraction of the corpus made of constant patches.
    #[arg(long, default_value_t = 0.0)]
    pub with_uniform: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path (default: next to the corpus, `.manifest.tsv`).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// JSON topology, e.g. '{"levels":3,"steps":8,"hidden":64}'.
    #[arg(long, default_value = "{}")]
    pub topology: String,
    #[arg(long, default_value_t = 2000)]
    pub batches: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Per-component gradient clip; 0 disables.
    #[arg(long, default_value_t = 5.0)]
    pub clip_value: f64,
    /// Global gradient norm clip; 0 disables.
    #[arg(long, default_value_t = 100.0)]
    pub clip_norm: f64,
    /// Seeds both parameter initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Save every N batches (0: only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub no_dequantize: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Loss history path (default: next to the model, `.loss.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum NoiseMode {
    Gaussian,
    Speckle,
    Empirical,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub mode: NoiseMode,
    /// Gaussian standard deviation (also the empirical eta sigma when
    /// --eta-sigma is absent).
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 7e6)]
    pub f0_hz: f64,
    #[arg(long, default_value_t = 1540.0)]
    pub c_mps: f64,
    #[arg(long, default_value_t = 0.25)]
    pub sigma_rx_mm: f64,
    #[arg(long, default_value_t = 0.3)]
    pub sigma_ry_mm: f64,
    #[arg(long, default_value_t = 0.1)]
    pub pixel_spacing_mm: f64,
    #[arg(long, default_value_t = 2)]
    pub oversample: usize,
    #[arg(long, default_value_t = 60.0)]
    pub dynamic_range_db: f64,
    #[arg(long)]
    pub eta_sigma: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DenoiseArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `auto:sigma=<σ>` for 0.75σ², or `fixed:<λ>`.
    #[arg(long, default_value = "fixed:10")]
    pub lambda: LambdaRule,
    /// Tile stride (default: half the patch size).
    #[arg(long)]
    pub stride: Option<usize>,
    /// Weight of the noisy input in the output.
    #[arg(long, default_value_t = 0.0)]
    pub mixback: f64,
    #[arg(long, default_value_t = 400)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Patches optimized together.
    #[arg(long, default_value_t = 250)]
    pub batch: usize,
    /// Start from the encoding of the noisy patch instead of z = 0.
    #[arg(long)]
    pub encode_init: bool,
    #[arg(long, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Per-patch optimizer history.
    #[arg(long)]
    pub history_csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NlmArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub h: f64,
    #[arg(long, default_value_t = 11)]
    pub patch: usize,
    /// Search radius.
    #[arg(long, default_value_t = 10)]
    pub distance: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub clean: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub candidates: Vec<PathBuf>,
    /// Noise level recorded in the sigma column.
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Image id column (default: clean file stem).
    #[arg(long)]
    pub image_id: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunExperimentArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Use this checkpoint instead of the spec's model or training section.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Override the spec's output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    /// Seed of the first image; image k uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "f32r", value_parser = ["f32r", "pgm"])]
    pub format: String,
}
