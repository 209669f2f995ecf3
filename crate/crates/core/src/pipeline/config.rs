use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamConfig, PipelineError};
use crate::data::{SplitRatios, SynthConfig};
use crate::models::{EpVariant, ModelDims, TsmConfig};

/// Every knob of a run, serialized flat as `key = value` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,

    pub dataset: String,
    pub input_dim: usize,
    pub per_class: usize,
    pub sep: f64,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,

    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub patches: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_visual: usize,
    pub max_len: usize,
    pub adapter_rank: usize,
    pub tc_layers: usize,

    pub warmup_steps: usize,
    pub warmup_batch_size: usize,
    pub warmup_lr: f64,

    pub tsm_epochs: usize,
    pub tsm_lr: f64,
    pub tsm_batch_size: usize,

    pub ep_variant: EpVariant,
    pub alpha: f64,
    pub beta: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,

    /// Decode budget for greedy prediction, in tokens.
    pub max_new_tokens: usize,
    pub histogram_bins: usize,

    /// Mean shift of the plug-swap task, in units of `sep`, with alternating
    /// sign along the class axes.
    pub shift: f64,
    pub swap_tsm_epochs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let dims = ModelDims::default();
        Self {
            seed: 0,
            dataset: "derma".into(),
            input_dim: dims.input_dim,
            per_class: 60,
            sep: 6.0,
            train_ratio: 0.7,
            val_ratio: 0.1,
            test_ratio: 0.2,
            d_model: dims.d_model,
            layers: dims.layers,
            heads: dims.heads,
            ff: dims.ff,
            patches: dims.patches,
            d_v: dims.d_v,
            d_t: dims.d_t,
            d_visual: dims.d_visual,
            max_len: dims.max_len,
            adapter_rank: dims.lora_rank,
            tc_layers: dims.tc_layers,
            warmup_steps: 300,
            warmup_batch_size: 16,
            warmup_lr: 3e-3,
            tsm_epochs: 30,
            tsm_lr: 1e-2,
            tsm_batch_size: 32,
            ep_variant: EpVariant::Cls,
            alpha: 1.0,
            beta: 1.0,
            epochs_stage1: 1,
            epochs_stage2: 1,
            learning_rate: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_new_tokens: 6,
            histogram_bins: 40,
            shift: 0.5,
            swap_tsm_epochs: 30,
        }
    }
}

impl TrainingConfig {
    /// Parses `key = value` lines. Blank lines and `#` comments are skipped;
    /// unknown and repeated keys are errors. Missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut map = serde_json::Map::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("line {}: expected key = value, found {line:?}", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            // numbers and booleans parse as JSON; everything else is a string
            let v = serde_json::from_str::<serde_json::Value>(value)
                .ok()
                .filter(|v| v.is_number() || v.is_boolean())
                .unwrap_or_else(|| serde_json::Value::String(value.to_string()));
            if map.insert(key.to_string(), v).is_some() {
                return Err(PipelineError::Config(format!("line {}: duplicate key {key:?}", i + 1)));
            }
        }
        let cfg: Self = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::parse(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    /// Flat key to value-string map, in key order.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let value = serde_json::to_value(self).expect("plain data");
        value
            .as_object()
            .expect("struct")
            .iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), s)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, PipelineError> {
        Self::parse(&map.iter().map(|(k, v)| format!("{k} = {v}\n")).collect::<String>())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return bad(format!("alpha and beta must be finite and >= 0, got {} and {}", self.alpha, self.beta));
        }
        for (name, v) in [("learning_rate", self.learning_rate), ("warmup_lr", self.warmup_lr), ("tsm_lr", self.tsm_lr)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in
            [("batch_size", self.batch_size), ("warmup_batch_size", self.warmup_batch_size), ("tsm_batch_size", self.tsm_batch_size)]
        {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.histogram_bins == 0 || self.max_new_tokens == 0 {
            return bad("histogram_bins and max_new_tokens must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps.is_nan() || self.eps <= 0.0 {
            return bad("optimizer settings need 0 <= beta1, beta2 < 1 and eps > 0".into());
        }
        if !self.shift.is_finite() {
            return bad(format!("shift must be finite, got {}", self.shift));
        }
        self.split_ratios()?;
        self.dims().validate()?;
        Ok(())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.input_dim,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff: self.ff,
            patches: self.patches,
            d_v: self.d_v,
            d_t: self.d_t,
            d_visual: self.d_visual,
            max_len: self.max_len,
            lora_rank: self.adapter_rank,
            tc_layers: self.tc_layers,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn split_ratios(&self) -> Result<SplitRatios, PipelineError> {
        let r = [self.train_ratio, self.val_ratio, self.test_ratio];
        if r.iter().any(|&x| x.is_nan() || x < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(PipelineError::Config(format!("split ratios must be non-negative and sum to 1, got {r:?}")));
        }
        Ok(SplitRatios { train: r[0], val: r[1], test: r[2] })
    }

    pub fn tsm_config(&self) -> TsmConfig {
        TsmConfig {
            epochs: self.tsm_epochs,
            lr: self.tsm_lr,
            batch_size: self.tsm_batch_size,
            seed: self.seed,
            hidden: self.d_t,
        }
    }

    /// The synthetic task for `classes` classes.
    pub fn synth(&self, classes: usize) -> SynthConfig {
        SynthConfig::new(&self.dataset, classes, self.input_dim, self.per_class, self.sep, self.seed)
    }

    /// The mean-shifted variant used for the plug-swap study, drawn with a
    /// different seed.
    pub fn shifted_synth(&self, classes: usize) -> SynthConfig {
        let mut cfg = self.synth(classes);
        cfg.seed = self.seed ^ 0x5348_4946;
        cfg.mean_shift = (0..self.input_dim)
            .map(|j| match j {
                j if j >= classes => 0.0,
                j if j % 2 == 0 => self.shift * self.sep,
                _ => -self.shift * self.sep,
            })
            .collect();
        cfg
    }
}
