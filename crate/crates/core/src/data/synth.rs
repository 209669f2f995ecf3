use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassificationSample, DataError};

/// Class-conditional Gaussian clusters.
///
/// Class `k` has mean `sep * e_k` over the first `classes` axes. The next
/// `noise_dims` axes carry unit-variance noise with zero mean; any axes past
/// `classes + noise_dims` are identically zero. `mean_shift`, when non-empty,
/// is added to every sample (used for distribution-shifted variants).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dataset_id: String,
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub sep: f64,
    pub noise_dims: usize,
    pub seed: u64,
    pub mean_shift: Vec<f64>,
}

impl SynthConfig {
    pub fn new(dataset_id: &str, classes: usize, dims: usize, per_class: usize, sep: f64, seed: u64) -> Self {
        Self {
            dataset_id: dataset_id.to_string(),
            classes,
            dims,
            per_class,
            sep,
            noise_dims: dims.saturating_sub(classes),
            seed,
            mean_shift: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dims < self.classes {
            return bad(format!("dims {} < classes {}", self.dims, self.classes));
        }
        if self.classes + self.noise_dims > self.dims {
            return bad(format!("{} noise dims do not fit in {} dims", self.noise_dims, self.dims));
        }
        if self.sep.is_nan() || self.sep < 0.0 || !self.sep.is_finite() {
            return bad(format!("separation must be finite and non-negative, got {}", self.sep));
        }
        if self.per_class == 0 {
            return bad("per_class must be positive".into());
        }
        if !self.mean_shift.is_empty() && self.mean_shift.len() != self.dims {
            return bad(format!("mean_shift has {} entries for {} dims", self.mean_shift.len(), self.dims));
        }
        Ok(())
    }
}

/// Draws `classes * per_class` samples, interleaved by class.
pub fn generate_synthetic_task(cfg: &SynthConfig) -> Result<Vec<ClassificationSample>, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let active = cfg.classes + cfg.noise_dims;
    let mut out = Vec::with_capacity(cfg.classes * cfg.per_class);
    for i in 0..cfg.per_class {
        for k in 0..cfg.classes {
            let mut x = vec![0.0; cfg.dims];
            for (j, v) in x.iter_mut().enumerate().take(active) {
                let noise: f64 = StandardNormal.sample(&mut rng);
                *v = noise + if j == k { cfg.sep } else { 0.0 };
            }
            for (v, s) in x.iter_mut().zip(&cfg.mean_shift) {
                *v += s;
            }
            out.push(ClassificationSample {
                sample_id: format!("{}-{:05}", cfg.dataset_id, i * cfg.classes + k),
                features: x,
                dataset_id: cfg.dataset_id.clone(),
                label: k,
            });
        }
    }
    Ok(out)
}
