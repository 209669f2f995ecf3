use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::Tensor;

/// Fixed random linear map standing in for a frozen vision tower.
///
/// Patch embeddings are `x · W_patch` reshaped to `P x d_v`; the pooled
/// embedding is `x · W_pool`. There is no bias, so a zero image maps to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenEncoder {
    pub patch_proj: Tensor,
    pub pool_proj: Tensor,
    pub patches: usize,
    pub d_v: usize,
}

impl FrozenEncoder {
    pub fn new(input_dim: usize, patches: usize, d_v: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (input_dim as f64).sqrt()).expect("valid std");
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| normal.sample(&mut rng)).collect() };
        let patch_proj = Tensor::matrix(input_dim, patches * d_v, draw(input_dim * patches * d_v)).expect("sized");
        let pool_proj = Tensor::matrix(input_dim, d_v, draw(input_dim * d_v)).expect("sized");
        Self { patch_proj, pool_proj, patches, d_v }
    }

    pub fn input_dim(&self) -> usize {
        self.patch_proj.rows()
    }
}

fn project(x: &[f64], w: &Tensor) -> Vec<f64> {
    let cols = w.last_dim();
    let mut out = vec![0.0; cols];
    for (xi, row) in x.iter().zip(w.data().chunks(cols)) {
        for (o, wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

/// Returns `(patch_embeddings [P, d_v], pooled [d_v])`.
pub fn encode_image(features: &[f64], encoder: &FrozenEncoder) -> Result<(Tensor, Tensor), ModelError> {
    if features.len() != encoder.input_dim() {
        return Err(ModelError::DimMismatch(format!(
            "image has {} features, encoder expects {}",
            features.len(),
            encoder.input_dim()
        )));
    }
    let patches = Tensor::matrix(encoder.patches, encoder.d_v, project(features, &encoder.patch_proj))?;
    let pooled = Tensor::vector(project(features, &encoder.pool_proj));
    Ok((patches, pooled))
}
