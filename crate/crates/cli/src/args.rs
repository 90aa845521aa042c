use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use lipvli_core::dataset::Protocol;

pub const OUT_DIR_ENV: &str = "LIPVLI_OUT_DIR";

/// Lip-geometry language and speaker identification pipeline.
///
/// Every subcommand writes its outputs and a `run_<subcommand>.json`
/// metadata file into the output directory. Parameters may also come from a
/// JSON config file (`--config`); flags given on the command line win.
///
/// Exit status: 0 success, 1 usage error, 2 data or validation error,
/// 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "lipvli", version, about, long_about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Globals,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct Globals {
    /// JSON config file. Keys are parameter names in snake_case, either at the
    /// top level or under a section named after the subcommand.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Worker threads for feature extraction, grid search and preprocessing
    /// (default: available cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, env = OUT_DIR_ENV)]
    pub out_dir: Option<PathBuf>,

    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    #[serde(skip)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a dataset manifest.
    Validate(ValidateArgs),
    /// Split a manifest into train/validation/test clip lists.
    Partition(PartitionArgs),
    /// Extract pivot-distance features from landmark files.
    Features(FeaturesArgs),
    /// Grid-search SVM hyperparameters and fit the final model.
    Train(TrainArgs),
    /// Score clips with a trained model.
    Predict(PredictArgs),
    /// Combine identity scores with language predictions.
    Fuse(FuseArgs),
    /// Compute accuracies, confusion matrices and error attribution.
    Evaluate(EvaluateArgs),
    /// Convert frames to grayscale or edge maps and pack them as tensors.
    Preprocess(PreprocessArgs),
    /// Draw synthetic identity scores and language predictions.
    Simulate(SimulateArgs),
    /// Write a synthetic manifest with landmark files.
    Synth(SynthArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate(_) => "validate",
            Command::Partition(_) => "partition",
            Command::Features(_) => "features",
            Command::Train(_) => "train",
            Command::Predict(_) => "predict",
            Command::Fuse(_) => "fuse",
            Command::Evaluate(_) => "evaluate",
            Command::Preprocess(_) => "preprocess",
            Command::Simulate(_) => "simulate",
            Command::Synth(_) => "synth",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ValidateArgs {
    /// Manifest JSON.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Allow subjects with fewer than five clips.
    #[arg(long)]
    pub lenient: bool,
    /// Also parse every referenced landmark file.
    #[arg(long)]
    pub check_landmarks: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PartitionArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// subject_dependent or subject_independent.
    #[arg(long)]
    pub protocol: Option<Protocol>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    All,
    Train,
    Validation,
    Test,
    /// Train and validation together.
    Pool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Identity,
    Language,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file; without it every manifest clip is used.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::All)]
    pub part: Part,
    /// Pivot landmark index (0-7).
    #[arg(long, default_value_t = 0)]
    pub pivot: usize,
    /// Comma-separated metrics (euclidean, manhattan, cosine) or `all`.
    #[arg(long, default_value = "all")]
    pub metrics: String,
    /// Frames after temporal resampling.
    #[arg(long, default_value_t = 250)]
    pub frames: usize,
    /// Output tensor name; a JSON sidecar with the same stem is written too.
    #[arg(long, default_value = "features.lbtf")]
    pub output: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Split file; the model is trained on train + validation.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Target::Identity)]
    pub target: Target,
    /// Kernels: linear, rbf:<gamma>, polynomial:<gamma>:<degree>:<coef0>
    /// (repeatable or comma-separated; default: linear and rbf with gamma 0.01, 0.1, 1).
    #[arg(long, value_delimiter = ',')]
    pub kernel: Vec<String>,
    /// Box constraints (default: 0.1, 1, 10, 100).
    #[arg(long = "c", value_delimiter = ',')]
    pub c: Vec<f64>,
    /// Pivot indices (default: 0-7).
    #[arg(long, value_delimiter = ',')]
    pub pivot: Vec<usize>,
    /// Metric sets, repeatable; each is a `+`-joined metric list or `all`
    /// (default: each single metric and all).
    #[arg(long)]
    pub metrics: Vec<String>,
    /// Resampled frame counts (default: 250).
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    pub k_min: usize,
    #[arg(long, default_value_t = 10)]
    pub k_max: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// KKT tolerance.
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f64,
    /// SMO iteration cap per binary problem.
    #[arg(long, default_value_t = 100_000)]
    pub max_iter: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    /// Model header written by `train`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Precomputed feature tensor; otherwise features come from the manifest.
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    /// Output score CSV name.
    #[arg(long, default_value = "scores.csv")]
    pub output: String,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct FuseArgs {
    /// Identity score CSV.
    #[arg(long)]
    pub identity_scores: Option<PathBuf>,
    /// Language score CSV; the argmax per probe is the predicted language.
    #[arg(long)]
    pub language_scores: Option<PathBuf>,
    /// Language prediction CSV (probe_id,language).
    #[arg(long)]
    pub language_pred: Option<PathBuf>,
    /// Gallery CSV (identity,language).
    #[arg(long)]
    pub gallery: Option<PathBuf>,
    /// Manifest to derive the gallery from, instead of --gallery.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub identity_scores: Option<PathBuf>,
    /// Fused decisions JSON from `fuse`.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub language_scores: Option<PathBuf>,
    #[arg(long)]
    pub language_pred: Option<PathBuf>,
    /// Truth CSV (probe_id,identity,language).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Manifest to take the truth from (probe ids are clip ids).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Top-k used by the fusion, for error attribution.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Row name in the report.
    #[arg(long, default_value = "SVM")]
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Gray,
    Sobel,
    Laplacian,
    Canny,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PreprocessArgs {
    /// Directory of PGM/PPM frames, processed in file-name order.
    #[arg(long)]
    pub frames_dir: Option<PathBuf>,
    /// Operations (repeatable or comma-separated).
    #[arg(long, value_enum, value_delimiter = ',', default_value = "gray")]
    pub op: Vec<Op>,
    /// Canny low threshold as a fraction of the largest gradient.
    #[arg(long, default_value_t = 0.1)]
    pub low: f64,
    /// Canny high threshold as a fraction of the largest gradient.
    #[arg(long, default_value_t = 0.3)]
    pub high: f64,
    /// Also write every processed frame as PGM.
    #[arg(long)]
    pub write_frames: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 256)]
    pub subjects: usize,
    #[arg(long, default_value_t = 8)]
    pub languages: usize,
    #[arg(long, default_value_t = 10_000)]
    pub probes: usize,
    #[arg(long, default_value_t = 0.496)]
    pub top1_acc: f64,
    #[arg(long, default_value_t = 0.80)]
    pub topk_hit: f64,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 0.86)]
    pub lang_acc: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub languages: usize,
    #[arg(long, default_value_t = 6)]
    pub subjects_per_language: usize,
    #[arg(long, default_value_t = 250)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
