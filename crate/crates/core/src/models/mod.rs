//! Frozen encoder, task-specific model, connectors and the toy decoder.

mod decoder;
mod encoder;
mod tsm;

pub use decoder::{
    set_trainable, vlm_forward, EpVariant, ForwardOut, ParamGroup, PreparedRecord, ResponseLogits, SeqInput,
    TrainPhase, VlmModel,
};
pub use encoder::{encode_image, FrozenEncoder};
pub use tsm::{extract_exemplar, train_tsm, ExemplarFeatures, TsmConfig, TsmModel};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::DataError;
use crate::numerics::NumericsError;

/// Sizes of every model component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Feature length `D` of a synthetic image.
    pub input_dim: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    /// Image patch count `P`.
    pub patches: usize,
    pub d_v: usize,
    /// Exemplar width (the TSM's hidden width).
    pub d_t: usize,
    /// Trailing residual-stream columns reserved for visual input. The base
    /// decoder never reads them, so only adapters and the task connector can
    /// make its output depend on the image.
    pub d_visual: usize,
    pub max_len: usize,
    pub lora_rank: usize,
    /// 1 for an affine task connector, 2 for affine-GELU-affine.
    pub tc_layers: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            input_dim: 16,
            d_model: 64,
            layers: 2,
            heads: 2,
            ff: 256,
            patches: 4,
            d_v: 16,
            d_t: 32,
            d_visual: 16,
            max_len: 128,
            lora_rank: 4,
            tc_layers: 1,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadDims(m));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} is not divisible into {} heads", self.d_model, self.heads));
        }
        if self.d_visual == 0 || self.d_visual >= self.d_model {
            return bad(format!("visual channel {} must be in 1..{}", self.d_visual, self.d_model));
        }
        if self.patches == 0 || self.patches > self.input_dim {
            return bad(format!("{} patches for {} input dims", self.patches, self.input_dim));
        }
        if [self.layers, self.ff, self.d_v, self.d_t, self.lora_rank, self.max_len].contains(&0) {
            return bad("all sizes must be positive".into());
        }
        if !(1..=2).contains(&self.tc_layers) {
            return bad(format!("task connector depth must be 1 or 2, got {}", self.tc_layers));
        }
        Ok(())
    }

    /// First residual column of the visual channel.
    pub fn visual_start(&self) -> usize {
        self.d_model - self.d_visual
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid model dimensions: {0}")]
    BadDims(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("exemplar variant {0} needs a task-specific model")]
    MissingTsm(EpVariant),
    #[error("sequence of {len} positions exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("unknown parameter {0}")]
    UnknownParam(String),
    #[error("non-finite TSM loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("optimizer: {0}")]
    Optimizer(String),
}
