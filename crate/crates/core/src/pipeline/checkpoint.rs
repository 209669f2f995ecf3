use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, PipelineError};
use crate::models::{EpVariant, TsmModel, VlmModel};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// Where exemplar rows sit in the visual prefix.
pub const EXEMPLAR_POSITION: &str = "after_image_before_instruction";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Stage1,
    Stage2,
    Vanilla,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Vanilla => "vanilla",
        })
    }
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Word position, as a decimal string (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng, PipelineError> {
        let bad = || PipelineError::Checkpoint(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }

    /// A fresh stream derived from a run seed.
    pub fn fresh(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self::capture(&rng)
    }
}

/// The two random streams of a training run. Shuffling and negative
/// sampling are independent so that turning CRT off does not change the
/// batch order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStates {
    pub shuffle: RngState,
    pub negatives: RngState,
}

impl RngStates {
    pub fn fresh(seed: u64) -> Self {
        Self { shuffle: RngState::fresh(seed, 1), negatives: RngState::fresh(seed, 2) }
    }
}

/// One optimizer step of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub van: f64,
    pub ep: f64,
    pub rda: f64,
    pub crt: f64,
    pub total: f64,
}

/// Everything needed to resume or evaluate a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub stage: Stage,
    pub vocab_hash: String,
    pub ep_variant: EpVariant,
    pub exemplar_position: String,
    pub config: BTreeMap<String, String>,
    /// TSM the decoder was tuned with.
    pub tsm_hash: Option<String>,
    /// TSM plugged in at inference, when different from the training one.
    pub swapped_tsm_hash: Option<String>,
    pub rng: RngStates,
    pub optimizer: AdamState,
    pub epochs_done: usize,
    pub loss_trace: Vec<TraceRow>,
    pub model: VlmModel,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string(self).map_err(|e| PipelineError::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| PipelineError::io(path, e))
    }

    /// Loads a checkpoint; with `vocab_hash`, rejects one built on another vocabulary.
    pub fn load(path: &Path, vocab_hash: Option<&str>) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(PipelineError::Checkpoint(format!(
                "{}: format {} is not supported (expected {CHECKPOINT_FORMAT})",
                path.display(),
                ckpt.format
            )));
        }
        if let Some(want) = vocab_hash {
            if ckpt.vocab_hash != want {
                return Err(PipelineError::VocabMismatch { expected: want.to_string(), found: ckpt.vocab_hash });
            }
        }
        Ok(ckpt)
    }

    /// Records `new_tsm` as the inference-time TSM. The decoder is untouched.
    pub fn swap_tsm(&self, new_tsm: &TsmModel) -> Result<Checkpoint, PipelineError> {
        let want = self.model.dims.d_t;
        if new_tsm.hidden() != want {
            return Err(PipelineError::TsmMismatch(format!(
                "exemplar width {} does not match the task connector input {want}",
                new_tsm.hidden()
            )));
        }
        if new_tsm.patches != self.model.dims.patches {
            return Err(PipelineError::TsmMismatch(format!(
                "TSM yields {} patch exemplars, the decoder expects {}",
                new_tsm.patches, self.model.dims.patches
            )));
        }
        let mut out = self.clone();
        let hash = new_tsm.hash();
        out.swapped_tsm_hash = (self.tsm_hash.as_deref() != Some(hash.as_str())).then_some(hash);
        Ok(out)
    }
}

/// Loss trace as CSV: `step,epoch,van,ep,rda,crt,total`.
pub fn loss_trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,van,ep,rda,crt,total\n");
    for r in trace {
        writeln!(out, "{},{},{:?},{:?},{:?},{:?},{:?}", r.step, r.epoch, r.van, r.ep, r.rda, r.crt, r.total)
            .expect("in-memory");
    }
    out
}

pub fn write_loss_trace(path: &Path, trace: &[TraceRow]) -> Result<(), PipelineError> {
    std::fs::write(path, loss_trace_csv(trace)).map_err(|e| PipelineError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn rng_state_resumes_mid_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        rng.set_stream(7);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let state = RngState::capture(&rng);
        let mut back = state.restore().unwrap();
        let a: Vec<u64> = (0..20).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..20).map(|_| back.random()).collect();
        assert_eq!(a, b);
        let json = serde_json::to_string(&state).unwrap();
        assert_eq!(serde_json::from_str::<RngState>(&json).unwrap(), state);
    }

    #[test]
    fn fresh_streams_differ() {
        let s = RngStates::fresh(3);
        let a: u64 = s.shuffle.restore().unwrap().random();
        let b: u64 = s.negatives.restore().unwrap().random();
        assert_ne!(a, b);
    }

    #[test]
    fn malformed_state_is_rejected() {
        let mut s = RngState::fresh(1, 1);
        s.word_pos = "x".into();
        assert!(s.restore().is_err());
        s = RngState::fresh(1, 1);
        s.seed.truncate(10);
        assert!(s.restore().is_err());
    }
}
