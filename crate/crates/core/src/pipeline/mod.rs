//! Warm-up, the two VITask stages, the vanilla baseline, the optimizer,
//! checkpoints and TSM swapping.

mod checkpoint;
mod config;
mod optim;
mod task;
mod train;

pub use checkpoint::{
    loss_trace_csv, write_loss_trace, Checkpoint, RngState, RngStates, Stage, TraceRow, CHECKPOINT_FORMAT, EXEMPLAR_POSITION,
};
pub use config::TrainingConfig;
pub use optim::{optimizer_step, AdamConfig, AdamState};
pub use task::TaskData;
pub use train::{
    batch_objective, changed_params, run_stage1, run_stage2, run_vanilla, run_warmup, train_loop, warmup_corpus,
    BatchTerms, LoopSpec, Objective,
};

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::DataError;
use crate::models::ModelError;
use crate::numerics::NumericsError;
use crate::objectives::ObjectiveError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("gradient for unknown parameter {0}")]
    UnknownParam(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite gradient for {0}")]
    NonFiniteGradient(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("non-finite loss in {stage}, epoch {epoch}, batch {batch} (samples {})", sample_ids.join(", "))]
    NonFiniteLoss { stage: Stage, epoch: usize, batch: usize, sample_ids: Vec<String> },
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: expected {expected}, checkpoint has {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("expected a {expected} checkpoint, got {found}")]
    WrongStage { expected: Stage, found: Stage },
    #[error("exemplar-prompted training needs a task-specific model")]
    MissingTsm,
    #[error("TSM does not fit the decoder: {0}")]
    TsmMismatch(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}
