use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{InstructionRecord, NegativeIndex, TokenId};
use crate::models::{EpVariant, PreparedRecord, SeqInput, VlmModel};
use crate::numerics::{log_softmax_slice, Graph, Tensor};

/// Positive/negative response probabilities over a set of pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    /// Share of pairs whose positive probability is strictly higher.
    pub ranking_fraction: f64,
    pub pos_probs: Vec<f64>,
    pub neg_probs: Vec<f64>,
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    /// Densities normalized to unit area.
    pub pos_density: Vec<f64>,
    pub neg_density: Vec<f64>,
}

impl RankingReport {
    pub fn from_probs(pos_probs: Vec<f64>, neg_probs: Vec<f64>, bins: usize) -> Result<Self, EvalError> {
        if pos_probs.is_empty() {
            return Err(EvalError::Empty("pair set"));
        }
        if pos_probs.len() != neg_probs.len() {
            return Err(EvalError::LengthMismatch { preds: pos_probs.len(), labels: neg_probs.len() });
        }
        if bins == 0 {
            return Err(EvalError::Empty("histogram bins"));
        }
        let wins = pos_probs.iter().zip(&neg_probs).filter(|(p, n)| p > n).count();
        let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
        Ok(Self {
            ranking_fraction: wins as f64 / pos_probs.len() as f64,
            pos_density: density(&pos_probs, bins),
            neg_density: density(&neg_probs, bins),
            pos_probs,
            neg_probs,
            edges,
        })
    }

    /// Mean of `pos - neg` over pairs.
    pub fn separation(&self) -> f64 {
        let n = self.pos_probs.len() as f64;
        self.pos_probs.iter().zip(&self.neg_probs).map(|(p, q)| p - q).sum::<f64>() / n
    }

    pub fn strict_wins(&self) -> impl Iterator<Item = bool> + '_ {
        self.pos_probs.iter().zip(&self.neg_probs).map(|(p, n)| p > n)
    }
}

/// Histogram of values in `[0, 1]` scaled so that it integrates to 1.
fn density(values: &[f64], bins: usize) -> Vec<f64> {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let scale = bins as f64 / values.len() as f64;
    counts.iter().map(|&c| c as f64 * scale).collect()
}

/// Mean over positions of the probability assigned to each target token.
pub fn mean_token_prob(logits: &Tensor, targets: &[TokenId]) -> Result<f64, EvalError> {
    if targets.is_empty() || logits.rows() != targets.len() {
        return Err(EvalError::LengthMismatch { preds: logits.rows(), labels: targets.len() });
    }
    let mut ls = Vec::new();
    let mut total = 0.0;
    for (t, &y) in targets.iter().enumerate() {
        ls.clear();
        log_softmax_slice(logits.row(t), &mut ls)?;
        total += ls[y].exp();
    }
    Ok(total / targets.len() as f64)
}

/// One negative per anchor, drawn with a dedicated seed: pairs `(anchor, negative)`.
pub fn ranking_pairs(records: &[InstructionRecord], seed: u64) -> Result<Vec<(usize, usize)>, EvalError> {
    let index = NegativeIndex::new(records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7061_6972);
    Ok((0..records.len()).map(|i| (i, index.draw(i, &mut rng))).collect())
}

/// Probability of each anchor's response under its own image and under the
/// negative's image (same instruction).
pub fn ranking_stats(
    model: &VlmModel,
    records: &[PreparedRecord],
    pairs: &[(usize, usize)],
    variant: EpVariant,
    bins: usize,
) -> Result<RankingReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty("pair set"));
    }
    let mut pos = Vec::with_capacity(pairs.len());
    let mut neg = Vec::with_capacity(pairs.len());
    // positives and negatives go through identically shaped packed
    // forwards, so an image-blind model produces exact ties
    for chunk in pairs.chunks(32) {
        let mut pos_items: Vec<SeqInput> = Vec::with_capacity(chunk.len());
        let mut neg_items: Vec<SeqInput> = Vec::with_capacity(chunk.len());
        for &(i, j) in chunk {
            if i >= records.len() || j >= records.len() {
                return Err(EvalError::LengthMismatch { preds: i.max(j) + 1, labels: records.len() });
            }
            if records[i].prompt != records[j].prompt {
                return Err(EvalError::BadPair(records[i].sample_id.clone(), records[j].sample_id.clone()));
            }
            pos_items.push(records[i].teacher_forced());
            neg_items.push(records[j].with_response(&records[i].response));
        }
        let anchors: Vec<&PreparedRecord> = chunk.iter().map(|&(i, _)| &records[i]).collect();
        pos.extend(response_probs(model, &pos_items, &anchors, variant)?);
        neg.extend(response_probs(model, &neg_items, &anchors, variant)?);
    }
    RankingReport::from_probs(pos, neg, bins)
}

fn response_probs(
    model: &VlmModel,
    items: &[SeqInput],
    anchors: &[&PreparedRecord],
    variant: EpVariant,
) -> Result<Vec<f64>, EvalError> {
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, items, variant, true)?;
    let logits = g.value(fwd.logits);
    let v = logits.last_dim();
    let mut row = 0;
    let mut out = Vec::with_capacity(items.len());
    for (anchor, &n) in anchors.iter().zip(&fwd.rows) {
        let block = Tensor::matrix(n, v, logits.data()[row * v..(row + n) * v].to_vec())?;
        out.push(mean_token_prob(&block, &anchor.response)?);
        row += n;
    }
    Ok(out)
}
