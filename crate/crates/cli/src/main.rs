//! `lesion`: manifest, split, augment, pack, train, eval and explain.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lesion_core::augment::AugmentError;
use lesion_core::dataset::DatasetError;
use lesion_core::explain::{ExplainError, RankMode};
use lesion_core::image::ImageError;
use lesion_core::metrics::MetricsError;
use lesion_core::model::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Fractions(_) | DatasetError::EmptyClass(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Solver(_) | ModelError::BodyMismatch(_) | ModelError::UnknownLayer(_) | ModelError::NotConv(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidOp(_) | AugmentError::DuplicateStem(_) => CliError::Usage(e.to_string()),
            AugmentError::Dataset(d) => d.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<ExplainError> for CliError {
    fn from(e: ExplainError) -> Self {
        match e {
            ExplainError::Model(m) => m.into(),
            ExplainError::Class { .. } | ExplainError::Alpha(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "lesion", version, about = "Skin-lesion classification pipeline")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a manifest from a `<root>/<class>/<image>` tree.
    Manifest(ManifestArgs),
    /// Assign stratified train/validation(/test) splits.
    Split(SplitArgs),
    /// Expand a manifest with augmented copies.
    Augment(AugmentArgs),
    /// Write one split of a manifest as an indexed record pack.
    Pack(PackArgs),
    /// Train a network from record packs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a pack and write the AUC report.
    Eval(EvalArgs),
    /// Render GradCAM overlays for the most wrong or most correct examples.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value = "")]
    pub source_tag: String,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Share of the non-test entries assigned to training.
    #[arg(long)]
    pub train: Option<f64>,
    #[arg(long)]
    pub val: Option<f64>,
    /// Share of all unassigned entries carved out for testing first.
    #[arg(long)]
    pub test: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Clear existing split labels before splitting.
    #[arg(long)]
    pub reset: bool,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the augmented images (default: `augmented/` beside `--out`).
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    #[arg(long)]
    pub factor: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pipeline JSON (default: the six-transform lesion pipeline).
    #[arg(long)]
    pub pipeline: Option<PathBuf>,
    /// Augment unassigned entries, to be split afterwards.
    #[arg(long)]
    pub paper_order: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
    Unassigned,
}

#[derive(Debug, Args)]
pub struct PackArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub split: SplitName,
    /// Output pack (default: `<pack_dir>/<split>.pack`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub solver: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub train_pack: Option<PathBuf>,
    #[arg(long)]
    pub val_pack: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Class count when no training pack is read.
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Square input side when no training pack is read.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub freeze_batch_norm: bool,
    /// Start from this checkpoint's body with a fresh head.
    #[arg(long)]
    pub finetune: Option<PathBuf>,
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Rule {
    Closest,
    Youden,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pack to score (default: `<pack_dir>/test.pack`).
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Rule::Closest)]
    pub cutoff: Rule,
    /// JSON `{"title": ..., "values": {class: auc}}` shown as an extra column.
    #[arg(long)]
    pub reference: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Target {
    Predicted,
    True,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pack: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long, default_value = "most-wrong")]
    pub mode: RankMode,
    #[arg(long, default_value_t = 5)]
    pub n: usize,
    /// Feature map to explain (default: output of the last block).
    #[arg(long)]
    pub layer: Option<String>,
    #[arg(long, value_enum, default_value_t = Target::Predicted)]
    pub target: Target,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
