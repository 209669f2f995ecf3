use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::{Catalog, ClassificationSample};
use crate::evaluation::compute_metrics;
use crate::numerics::{gelu, Graph, Tensor, Var};
use crate::pipeline::{optimizer_step, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsmConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TsmConfig {
    fn default() -> Self {
        Self { epochs: 30, lr: 1e-2, batch_size: 32, seed: 0, hidden: 32 }
    }
}

/// Two-layer classifier `D -> d_t (GELU) -> C_total` with one joint head
/// whose columns are partitioned into per-dataset class ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsmModel {
    pub params: BTreeMap<String, Tensor>,
    pub class_ranges: Vec<(String, Range<usize>)>,
    pub patches: usize,
    /// Epoch (1-based) whose weights were kept; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

/// Penultimate TSM activations used for exemplar prompting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarFeatures {
    /// Activation on the whole feature vector, length `d_t`.
    pub cls: Vec<f64>,
    /// One activation per patch, `P x d_t`; patch `p` sees only its own
    /// contiguous block of input features.
    pub patches: Tensor,
}

impl TsmModel {
    fn init(input_dim: usize, hidden: usize, catalog: &Catalog, patches: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_total = catalog.total_classes();
        let mut draw = |rows: usize, cols: usize| {
            let n = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("valid std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(&mut rng)).collect()).expect("sized")
        };
        let params = BTreeMap::from([
            ("w1".to_string(), draw(input_dim, hidden)),
            ("b1".to_string(), Tensor::zeros(&[hidden])),
            ("w2".to_string(), draw(hidden, c_total)),
            ("b2".to_string(), Tensor::zeros(&[c_total])),
        ]);
        let class_ranges = catalog
            .datasets()
            .iter()
            .map(|d| (d.id.clone(), catalog.class_range(&d.id).expect("listed dataset")))
            .collect();
        Self { params, class_ranges, patches, best_epoch: 0, best_val_f1: 0.0 }
    }

    pub fn input_dim(&self) -> usize {
        self.params["w1"].rows()
    }

    pub fn hidden(&self) -> usize {
        self.params["w1"].last_dim()
    }

    pub fn total_classes(&self) -> usize {
        self.params["b2"].numel()
    }

    pub fn range_of(&self, dataset_id: &str) -> Result<Range<usize>, ModelError> {
        self.class_ranges
            .iter()
            .find(|(id, _)| id == dataset_id)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| crate::data::DataError::UnknownDataset(dataset_id.to_string()).into())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim() {
            return Err(ModelError::DimMismatch(format!(
                "TSM expects {} features, got {}",
                self.input_dim(),
                x.len()
            )));
        }
        Ok(())
    }

    fn hidden_activation(&self, x: &[f64]) -> Vec<f64> {
        let (w1, b1) = (&self.params["w1"], self.params["b1"].data());
        let h = w1.last_dim();
        let mut z = b1.to_vec();
        for (xi, row) in x.iter().zip(w1.data().chunks(h)) {
            if *xi != 0.0 {
                z.iter_mut().zip(row).for_each(|(a, w)| *a += xi * w);
            }
        }
        z.into_iter().map(gelu).collect()
    }

    /// Joint-head logits (all `C_total` columns).
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_input(x)?;
        let h = self.hidden_activation(x);
        let (w2, b2) = (&self.params["w2"], self.params["b2"].data());
        let c = w2.last_dim();
        let mut out = b2.to_vec();
        for (hi, row) in h.iter().zip(w2.data().chunks(c)) {
            out.iter_mut().zip(row).for_each(|(a, w)| *a += hi * w);
        }
        Ok(out)
    }

    /// Dataset-local class index with the highest logit inside the sample's range.
    pub fn predict(&self, sample: &ClassificationSample) -> Result<usize, ModelError> {
        let range = self.range_of(&sample.dataset_id)?;
        let logits = self.logits(&sample.features)?;
        let slice = &logits[range];
        Ok((0..slice.len()).fold(0, |best, i| if slice[i] > slice[best] { i } else { best }))
    }

    /// Cross-entropy restricted to each sample's class range, averaged over
    /// the batch. Returns `(loss, logits)`; logits are `[B, C_total]`.
    pub fn masked_loss(&self, g: &mut Graph, batch: &[&ClassificationSample]) -> Result<(Var, Var), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyTrainSet);
        }
        let d = self.input_dim();
        let mut x = Vec::with_capacity(batch.len() * d);
        for s in batch {
            self.check_input(&s.features)?;
            x.extend_from_slice(&s.features);
        }
        let x = g.constant(Tensor::matrix(batch.len(), d, x)?);
        let v: BTreeMap<&str, Var> =
            self.params.iter().map(|(k, t)| (k.as_str(), g.input(&format!("tsm.{k}"), true, || t.clone()))).collect();
        let h = g.affine(x, v["w1"], v["b1"])?;
        let h = g.gelu(h);
        let logits = g.affine(h, v["w2"], v["b2"])?;
        let mut by_dataset: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, s) in batch.iter().enumerate() {
            let e = by_dataset.entry(s.dataset_id.as_str()).or_default();
            e.0.push(i);
            e.1.push(s.label);
        }
        let mut parts = Vec::new();
        for (id, (rows, labels)) in by_dataset {
            let range = self.range_of(id)?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= range.len()) {
                return Err(crate::data::DataError::UnknownLabel { dataset: id.to_string(), label: bad }.into());
            }
            let sel = g.select_rows(logits, &rows)?;
            let sl = g.slice_cols(sel, range.start, range.len())?;
            let ls = g.log_softmax(sl)?;
            let picked = g.gather(ls, &labels)?;
            parts.push(g.sum(picked));
        }
        let mut total = parts[0];
        for &p in &parts[1..] {
            total = g.add(total, p)?;
        }
        Ok((g.scale(total, -1.0 / batch.len() as f64), logits))
    }

    fn val_macro_f1(&self, val: &[ClassificationSample]) -> Result<f64, ModelError> {
        let mut preds = Vec::with_capacity(val.len());
        let mut labels = Vec::with_capacity(val.len());
        for s in val {
            let start = self.range_of(&s.dataset_id)?.start;
            preds.push(Some(start + self.predict(s)?));
            labels.push(start + s.label);
        }
        compute_metrics(&preds, &labels, self.total_classes())
            .map(|m| m.macro_f1)
            .map_err(|e| ModelError::DimMismatch(e.to_string()))
    }

    /// Continues training from these weights (used to fit a TSM to shifted
    /// data while keeping its feature space aligned with the original).
    pub fn fine_tune(
        &self,
        train: &[ClassificationSample],
        val: &[ClassificationSample],
        cfg: &TsmConfig,
    ) -> Result<TsmModel, ModelError> {
        let mut start = self.clone();
        start.best_epoch = 0;
        start.best_val_f1 = 0.0;
        fit(start, train, val, cfg)
    }

    /// SHA-256 of the model's canonical JSON.
    pub fn hash(&self) -> String {
        crate::data::hex_digest(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

fn fit(
    mut model: TsmModel,
    train: &[ClassificationSample],
    val: &[ClassificationSample],
    cfg: &TsmConfig,
) -> Result<TsmModel, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSet);
    }
    let adam = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7473_6d00);
    let mut best = model.clone();
    if !val.is_empty() {
        best.best_val_f1 = model.val_macro_f1(val)?;
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&ClassificationSample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let (loss, _) = model.masked_loss(&mut g, &batch)?;
            if !g.scalar(loss).is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: b });
            }
            let grads: BTreeMap<String, Tensor> = g
                .backward(loss)?
                .into_params()
                .into_iter()
                .map(|(k, v)| (k.trim_start_matches("tsm.").to_string(), v))
                .collect();
            optimizer_step(&mut model.params, &grads, &mut state, &adam)
                .map_err(|e| ModelError::Optimizer(e.to_string()))?;
        }
        if val.is_empty() {
            best = model.clone();
            best.best_epoch = epoch;
        } else {
            let f1 = model.val_macro_f1(val)?;
            if f1 > best.best_val_f1 {
                best = model.clone();
                best.best_epoch = epoch;
                best.best_val_f1 = f1;
            }
        }
    }
    Ok(best)
}

/// Trains a fresh TSM with the joint masked loss and keeps the epoch with the
/// best validation macro-F1 (the last epoch when `val` is empty).
pub fn train_tsm(
    train: &[ClassificationSample],
    val: &[ClassificationSample],
    catalog: &Catalog,
    patches: usize,
    cfg: &TsmConfig,
) -> Result<TsmModel, ModelError> {
    let first = train.first().ok_or(ModelError::EmptyTrainSet)?;
    let input_dim = first.features.len();
    if patches == 0 || patches > input_dim {
        return Err(ModelError::BadDims(format!("{patches} patches for {input_dim} input dims")));
    }
    fit(TsmModel::init(input_dim, cfg.hidden, catalog, patches, cfg.seed), train, val, cfg)
}

/// CLS and per-patch exemplars for one image.
pub fn extract_exemplar(tsm: &TsmModel, features: &[f64]) -> Result<ExemplarFeatures, ModelError> {
    tsm.check_input(features)?;
    let d = features.len();
    let cls = tsm.hidden_activation(features);
    let mut patches = Vec::with_capacity(tsm.patches * tsm.hidden());
    for p in 0..tsm.patches {
        let (lo, hi) = (p * d / tsm.patches, (p + 1) * d / tsm.patches);
        let masked: Vec<f64> = features.iter().enumerate().map(|(j, &v)| if (lo..hi).contains(&j) { v } else { 0.0 }).collect();
        patches.extend(tsm.hidden_activation(&masked));
    }
    Ok(ExemplarFeatures { cls, patches: Tensor::matrix(tsm.patches, tsm.hidden(), patches)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_task, split_dataset, SplitRatios, SynthConfig};

    fn derma() -> Catalog {
        Catalog::builtin().subset(&["derma"]).unwrap()
    }

    #[test]
    fn single_dataset_masked_loss_is_plain_cross_entropy() {
        let data = generate_synthetic_task(&SynthConfig::new("derma", 7, 16, 2, 6.0, 0)).unwrap();
        let tsm = TsmModel::init(16, 8, &derma(), 4, 1);
        let batch: Vec<&ClassificationSample> = data.iter().collect();
        let mut g = Graph::new();
        let (loss, _) = tsm.masked_loss(&mut g, &batch).unwrap();
        let mut want = 0.0;
        for s in &data {
            let z = tsm.logits(&s.features).unwrap();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            want += lse - z[s.label];
        }
        want /= data.len() as f64;
        assert!((g.scalar(loss) - want).abs() < 1e-12);
    }

    #[test]
    fn other_dataset_logits_get_zero_gradient() {
        let catalog = Catalog::builtin().subset(&["derma", "oct"]).unwrap();
        let tsm = TsmModel::init(16, 8, &catalog, 4, 1);
        let s = generate_synthetic_task(&SynthConfig::new("derma", 7, 16, 1, 6.0, 0)).unwrap();
        let mut g = Graph::new();
        let (loss, logits) = tsm.masked_loss(&mut g, &[&s[3]]).unwrap();
        let grads = g.backward(loss).unwrap();
        let gl = grads.wrt(logits).unwrap();
        assert!(gl.data()[7..11].iter().all(|&v| v == 0.0));
        assert!(gl.data()[..7].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn empty_train_is_an_error() {
        assert!(matches!(train_tsm(&[], &[], &derma(), 4, &TsmConfig::default()), Err(ModelError::EmptyTrainSet)));
    }

    #[test]
    fn exemplars_are_deterministic_and_shaped() {
        let tsm = TsmModel::init(16, 32, &derma(), 4, 1);
        let x: Vec<f64> = (0..16).map(|i| (i as f64).cos()).collect();
        let a = extract_exemplar(&tsm, &x).unwrap();
        assert_eq!(a, extract_exemplar(&tsm, &x).unwrap());
        assert_eq!(a.cls.len(), 32);
        assert_eq!(a.patches.shape(), &[4, 32]);
        assert!(a.cls.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn learns_separated_task() {
        let data = generate_synthetic_task(&SynthConfig::new("derma", 7, 16, 60, 6.0, 3)).unwrap();
        let split = split_dataset(&data, SplitRatios::default(), 3).unwrap();
        let tsm = train_tsm(&split.train, &split.val, &derma(), 4, &TsmConfig::default()).unwrap();
        let correct = split.test.iter().filter(|s| tsm.predict(s).unwrap() == s.label).count();
        assert!(correct as f64 / split.test.len() as f64 > 0.95);
        assert!(tsm.best_epoch >= 1);
    }
}
