use serde::{Deserialize, Serialize};

use super::EvalError;

/// A predicted class index, or `None` for a response that matched no class.
pub type Prediction = Option<usize>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n_samples: usize,
    pub reject_rate: f64,
    pub ep_used: bool,
    pub seed: u64,
}

impl MetricsReport {
    pub fn with_run(mut self, ep_used: bool, seed: u64) -> Self {
        self.ep_used = ep_used;
        self.seed = seed;
        self
    }
}

/// Accuracy, macro-F1 and per-class scores.
///
/// A rejected prediction is wrong and counts as a false negative for its true
/// class. Precision with no predictions, recall with no support and F1 with
/// `p + r = 0` are all 0; every class contributes to the macro mean.
pub fn compute_metrics(preds: &[Prediction], labels: &[usize], n_classes: usize) -> Result<MetricsReport, EvalError> {
    if preds.is_empty() {
        return Err(EvalError::Empty("predictions"));
    }
    if preds.len() != labels.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(EvalError::LabelOutOfRange { label: bad, n_classes });
    }
    let mut tp = vec![0usize; n_classes];
    let mut predicted = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    let mut rejects = 0;
    for (p, &l) in preds.iter().zip(labels) {
        support[l] += 1;
        match *p {
            Some(c) if c < n_classes => {
                predicted[c] += 1;
                if c == l {
                    tp[c] += 1;
                }
            }
            Some(_) | None => rejects += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..n_classes)
        .map(|c| {
            let precision = ratio(tp[c], predicted[c]);
            let recall = ratio(tp[c], support[c]);
            let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
            ClassMetrics { precision, recall, f1, support: support[c] }
        })
        .collect();
    let n = preds.len();
    Ok(MetricsReport {
        accuracy: ratio(tp.iter().sum(), n),
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / n_classes as f64,
        per_class,
        n_samples: n,
        reject_rate: ratio(rejects, n),
        ep_used: false,
        seed: 0,
    })
}
