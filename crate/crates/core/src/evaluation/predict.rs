use std::fmt;
use std::str::FromStr;

use super::{EvalError, Prediction};
use crate::data::{DatasetSpec, TokenId, Vocabulary};
use crate::models::{EpVariant, PreparedRecord, SeqInput, VlmModel};
use crate::numerics::{log_softmax_slice, Graph};

/// How a response is turned into a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    /// Argmax decoding until `<eos>`, then exact match against class names.
    Greedy,
    /// Class whose name (plus `<eos>`) has the highest mean token log-probability.
    ClassLikelihood,
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::ClassLikelihood => "class-likelihood",
        })
    }
}

impl FromStr for DecodeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "class-likelihood" => Ok(DecodeMode::ClassLikelihood),
            other => Err(format!("unknown decoding mode {other:?} (expected greedy or class-likelihood)")),
        }
    }
}

/// Tokenized class-name responses of one dataset, each ending in `<eos>`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassResponses {
    pub names: Vec<String>,
    pub tokens: Vec<Vec<TokenId>>,
}

impl ClassResponses {
    pub fn new(dataset: &DatasetSpec, vocab: &Vocabulary) -> Result<Self, EvalError> {
        let tokens = dataset
            .class_names
            .iter()
            .map(|n| {
                let mut t = vocab.encode(n)?;
                t.push(Vocabulary::EOS);
                Ok(t)
            })
            .collect::<Result<Vec<_>, crate::data::DataError>>()?;
        Ok(Self { names: dataset.class_names.clone(), tokens })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Class whose response is exactly `tokens`.
    pub fn lookup(&self, tokens: &[TokenId]) -> Prediction {
        self.tokens.iter().position(|t| t == tokens)
    }
}

/// Generates greedy responses for a batch of records, stepping all
/// unfinished sequences together. Each response stops at `<eos>` (included)
/// or after `max_new` tokens.
pub fn greedy_decode(
    model: &VlmModel,
    records: &[&PreparedRecord],
    variant: EpVariant,
    max_new: usize,
) -> Result<Vec<Vec<TokenId>>, EvalError> {
    let mut out: Vec<Vec<TokenId>> = vec![Vec::new(); records.len()];
    let mut active: Vec<usize> = (0..records.len()).collect();
    for _ in 0..max_new {
        if active.is_empty() {
            break;
        }
        let items: Vec<SeqInput> = active
            .iter()
            .map(|&i| SeqInput {
                prompt: &records[i].prompt,
                cont: &out[i],
                patches: &records[i].patches,
                exemplar: records[i].exemplar.as_ref(),
            })
            .collect();
        let mut g = Graph::new();
        let fwd = model.forward(&mut g, &items, variant, true)?;
        let logits = g.value(fwd.logits);
        let mut row = 0;
        let mut next = Vec::with_capacity(active.len());
        for (&i, &n) in active.iter().zip(&fwd.rows) {
            row += n;
            next.push((i, argmax(logits.row(row - 1))));
        }
        drop(g);
        active.clear();
        for (i, tok) in next {
            out[i].push(tok);
            if tok != Vocabulary::EOS {
                active.push(i);
            }
        }
    }
    Ok(out)
}

/// First index of the maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean log-probability of every class response for one record.
pub fn class_log_likelihoods(
    model: &VlmModel,
    record: &PreparedRecord,
    classes: &ClassResponses,
    variant: EpVariant,
) -> Result<Vec<f64>, EvalError> {
    if classes.is_empty() {
        return Err(EvalError::Empty("class responses"));
    }
    let items: Vec<SeqInput> = classes.tokens.iter().map(|t| record.with_response(t)).collect();
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, &items, variant, true)?;
    let logits = g.value(fwd.logits);
    let mut row = 0;
    let mut ls = Vec::new();
    let mut scores = Vec::with_capacity(classes.len());
    for (t, &n) in classes.tokens.iter().zip(&fwd.rows) {
        let mut total = 0.0;
        for (k, &tok) in t.iter().enumerate() {
            ls.clear();
            log_softmax_slice(logits.row(row + k), &mut ls)?;
            total += ls[tok];
        }
        scores.push(total / t.len() as f64);
        row += n;
    }
    Ok(scores)
}

/// Predicts a class for each record.
pub fn predict_batch(
    model: &VlmModel,
    records: &[PreparedRecord],
    classes: &ClassResponses,
    mode: DecodeMode,
    variant: EpVariant,
    max_new: usize,
) -> Result<Vec<Prediction>, EvalError> {
    match mode {
        DecodeMode::Greedy => {
            let mut out = Vec::with_capacity(records.len());
            for chunk in records.chunks(64) {
                let refs: Vec<&PreparedRecord> = chunk.iter().collect();
                for resp in greedy_decode(model, &refs, variant, max_new)? {
                    out.push(classes.lookup(&resp));
                }
            }
            Ok(out)
        }
        DecodeMode::ClassLikelihood => records
            .iter()
            .map(|r| Ok(Some(argmax(&class_log_likelihoods(model, r, classes, variant)?))))
            .collect(),
    }
}

/// Predicts one record.
pub fn predict(
    model: &VlmModel,
    record: &PreparedRecord,
    classes: &ClassResponses,
    mode: DecodeMode,
    variant: EpVariant,
    max_new: usize,
) -> Result<Prediction, EvalError> {
    Ok(predict_batch(model, std::slice::from_ref(record), classes, mode, variant, max_new)?[0])
}

/// Predicts every record and scores the predictions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &VlmModel,
    records: &[PreparedRecord],
    classes: &ClassResponses,
    mode: DecodeMode,
    variant: EpVariant,
    max_new: usize,
    seed: u64,
) -> Result<super::MetricsReport, EvalError> {
    let preds = predict_batch(model, records, classes, mode, variant, max_new)?;
    let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
    Ok(super::compute_metrics(&preds, &labels, classes.len())?.with_run(!variant.is_none(), seed))
}
