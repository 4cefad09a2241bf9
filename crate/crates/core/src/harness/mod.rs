//! Training, evaluation and reporting around the model: configuration
//! files, the optimizer, metrics, the ablation runner and the gradient
//! check suite.

mod ablate;
mod config;
mod data;
mod eval;
mod gradcheck;
mod metrics;
mod optim;
mod train;

pub use ablate::{
    ablate, ablate_with_progress, mean_sd, run_dir_name, AblationRun, AblationTable, ABLATION_FILE,
    ABLATION_RUNS_FILE,
};
pub use config::TrainConfig;
pub use data::{heldout_seeds, render_split, source_splits, split_file_names, target_split, train_seeds};
pub use eval::{checkpoint_id, evaluate, evaluate_model, evaluate_with, report_header, report_row};
pub use gradcheck::{
    required_checks, run_gradcheck, CheckResult, GradcheckOptions, GradcheckReport, LAYER_CHECKS,
};
pub use metrics::{confusion_and_miou, Confusion, MetricsReport};
pub use optim::{clip_grad_norm, AdamW};
pub use train::{
    accumulate_sample_gradients, train, train_with_progress, EpochRecord, TrainOutcome,
    CHECKPOINT_FILE, LOG_COLUMNS, LOG_FILE,
};

use thiserror::Error;

use crate::ndtensor::TensorError;
use crate::objective::ObjectiveError;
use crate::segmodel::CheckpointError;
use crate::synthbench::DatasetError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("loss became non-finite in epoch {epoch}; the last good checkpoint was kept")]
    NonFiniteLoss { epoch: usize },
}
