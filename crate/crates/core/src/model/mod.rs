//! Residual CNN with exact backward, step-decay SGD and checkpoints.

mod checkpoint;
mod config;
mod layers;
mod loss;
mod network;
mod solver;
mod tensor;
mod train;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::image::ImageError;
use crate::metrics::MetricsError;

pub use checkpoint::{replace_head, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{conv_out, BlockKind, InputDims, NetworkConfig, ParamKind, ParamSpec, StageSpec, StemSpec, HEAD_LR_MULT, HEAD_PREFIX};
pub use layers::{BN_EPS, BN_MOMENTUM};
pub use loss::{softmax, softmax_cross_entropy};
pub use network::{Cache, ForwardPass, Gradients, Mode, Network};
pub use solver::{momentum_step, sgd_update, SolverConfig, SolverState};
pub use tensor::Tensor;
pub use train::{
    accumulate_and_step, evaluate, load_batch, predict_source, train, train_observed, Evaluation, Predictions, StepReport, TrainEvent,
    TrainOptions, TrainOutcome, UpdateLog,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("invalid solver config: {0}")]
    Solver(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("activation cache is stale: parameters changed after the forward pass")]
    StaleCache,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("unknown layer `{0}`")]
    UnknownLayer(String),
    #[error("layer `{0}` is not a convolutional feature map")]
    NotConv(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint body does not match target config: {}", .0.join(", "))]
    BodyMismatch(Vec<String>),
    #[error("{0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ModelError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ModelError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
