use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW style); 0 disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam moments, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One Adam update of every parameter named in `grads`.
///
/// All gradients are checked for finiteness before anything is modified, so
/// a failed step leaves both parameters and state untouched.
pub fn optimizer_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<(), PipelineError> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| PipelineError::UnknownParam(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(PipelineError::Shape(format!("{name}: param {:?}, grad {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(PipelineError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        for (((pi, &gi), mi), vi) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let update = (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
            if cfg.weight_decay != 0.0 {
                *pi -= cfg.lr * cfg.weight_decay * *pi;
            }
            *pi -= cfg.lr * update;
        }
    }
    Ok(())
}
