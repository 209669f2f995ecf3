//! Response losses and their stage compositions.
//!
//! Every loss has a graph form operating on packed batches (rows of several
//! records stacked, as produced by [`VlmModel::forward`]) and a value form on
//! a single record's `[T, V]` logits. Batched losses are means over records of
//! per-record means over response positions.
//!
//! [`VlmModel::forward`]: crate::models::VlmModel::forward

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::TokenId;
use crate::numerics::{Graph, NumericsError, Tensor, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target token {token} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("loss weights must be finite and non-negative, got alpha={alpha}, beta={beta}")]
    NegativeWeight { alpha: f64, beta: f64 },
    #[error("stage must be 1 or 2, got {0}")]
    BadStage(u8),
}

/// Per-row weights `1 / (B * n_i)` for a batch with `rows[i]` positions in record `i`.
fn row_weights(rows: &[usize], scale: f64) -> Vec<f64> {
    let b = rows.len() as f64;
    rows.iter().flat_map(|&n| std::iter::repeat_n(scale / (b * n as f64), n)).collect()
}

fn check_rows(g: &Graph, v: Var, rows: &[usize]) -> Result<(), ObjectiveError> {
    let total: usize = rows.iter().sum();
    if g.value(v).rows() != total || rows.contains(&0) {
        return Err(ObjectiveError::Shape(format!("{} logit rows for segments {rows:?}", g.value(v).rows())));
    }
    Ok(())
}

fn check_targets(g: &Graph, v: Var, targets: &[TokenId]) -> Result<(), ObjectiveError> {
    let vocab = g.value(v).last_dim();
    if targets.len() != g.value(v).rows() {
        return Err(ObjectiveError::Shape(format!("{} targets for {} rows", targets.len(), g.value(v).rows())));
    }
    if let Some(&token) = targets.iter().find(|&&t| t >= vocab) {
        return Err(ObjectiveError::TokenOutOfRange { token, vocab });
    }
    Ok(())
}

fn weighted_sum(g: &mut Graph, per_row: Var, rows: &[usize], scale: f64) -> Result<Var, ObjectiveError> {
    let w = g.constant(Tensor::vector(row_weights(rows, scale)));
    let weighted = g.mul(per_row, w)?;
    Ok(g.sum(weighted))
}

/// Teacher-forced negative log-likelihood.
pub fn nll_graph(g: &mut Graph, logits: Var, targets: &[TokenId], rows: &[usize]) -> Result<Var, ObjectiveError> {
    check_rows(g, logits, rows)?;
    check_targets(g, logits, targets)?;
    let ls = g.log_softmax(logits)?;
    let picked = g.gather(ls, targets)?;
    weighted_sum(g, picked, rows, -1.0)
}

/// Per-token `KL(softmax(plain) || softmax(ep))`. With `detach`, the EP
/// branch is a stop-gradient target (RDA); without it, gradients reach both
/// branches (RDA*).
pub fn rda_graph(g: &mut Graph, plain: Var, ep: Var, rows: &[usize], detach: bool) -> Result<Var, ObjectiveError> {
    check_rows(g, plain, rows)?;
    if g.value(plain).shape() != g.value(ep).shape() {
        return Err(ObjectiveError::Shape(format!(
            "plain {:?} vs ep {:?}",
            g.value(plain).shape(),
            g.value(ep).shape()
        )));
    }
    let lp = g.log_softmax(plain)?;
    let lq = g.log_softmax(ep)?;
    let lq = if detach { g.stop_gradient(lq) } else { lq };
    let p = g.exp(lp);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let per_row = g.sum_last(terms);
    weighted_sum(g, per_row, rows, 1.0)
}

/// Log of the margin distribution `softmax(y_pos - y_neg)` per row.
pub fn log_margin_graph(g: &mut Graph, pos: Var, neg: Var) -> Result<Var, ObjectiveError> {
    if g.value(pos).shape() != g.value(neg).shape() {
        return Err(ObjectiveError::Shape(format!(
            "pos {:?} vs neg {:?}",
            g.value(pos).shape(),
            g.value(neg).shape()
        )));
    }
    let diff = g.sub(pos, neg)?;
    Ok(g.log_softmax(diff)?)
}

/// Contrastive response loss: NLL of the targets under the margin distribution.
pub fn crt_graph(
    g: &mut Graph,
    pos: Var,
    neg: Var,
    targets: &[TokenId],
    rows: &[usize],
) -> Result<Var, ObjectiveError> {
    check_rows(g, pos, rows)?;
    check_targets(g, pos, targets)?;
    let lm = log_margin_graph(g, pos, neg)?;
    let picked = g.gather(lm, targets)?;
    weighted_sum(g, picked, rows, -1.0)
}

/// The four loss terms, their weights and the stage total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: u8,
    pub van: f64,
    pub ep: f64,
    pub rda: f64,
    /// Reported as 0 in stage 1.
    pub crt: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

fn check_stage(stage: u8, alpha: f64, beta: f64) -> Result<(), ObjectiveError> {
    if stage != 1 && stage != 2 {
        return Err(ObjectiveError::BadStage(stage));
    }
    if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(ObjectiveError::NegativeWeight { alpha, beta });
    }
    Ok(())
}

/// Stage 1: `van + ep + alpha*rda`. Stage 2: `van + ep + alpha*rda + beta*crt`.
pub fn stage_loss(
    stage: u8,
    van: f64,
    ep: f64,
    rda: f64,
    crt: f64,
    alpha: f64,
    beta: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    check_stage(stage, alpha, beta)?;
    let mut total = van + ep + alpha * rda;
    let crt = if stage == 2 { crt } else { 0.0 };
    if stage == 2 {
        total += beta * crt;
    }
    Ok(LossBreakdown { stage, van, ep, rda, crt, total, alpha, beta })
}

/// Graph form of [`stage_loss`]. Terms with a zero weight are left out of the
/// total entirely, so they contribute no gradient.
#[allow(clippy::too_many_arguments)]
pub fn stage_total_graph(
    g: &mut Graph,
    stage: u8,
    van: Var,
    ep: Option<Var>,
    rda: Option<Var>,
    crt: Option<Var>,
    alpha: f64,
    beta: f64,
) -> Result<Var, ObjectiveError> {
    check_stage(stage, alpha, beta)?;
    let mut total = match ep {
        Some(e) => g.add(van, e)?,
        None => van,
    };
    if let (Some(r), true) = (rda, alpha != 0.0) {
        let s = g.scale(r, alpha);
        total = g.add(total, s)?;
    }
    if let (Some(c), true) = (crt, stage == 2 && beta != 0.0) {
        let s = g.scale(c, beta);
        total = g.add(total, s)?;
    }
    Ok(total)
}

fn single(g: &mut Graph, logits: &Tensor) -> (Var, Vec<usize>) {
    let rows = vec![logits.rows()];
    (g.constant(logits.clone()), rows)
}

/// Mean over response positions of `-log softmax(logits)[target]`.
pub fn nll_loss(logits: &Tensor, targets: &[TokenId]) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let (l, rows) = single(&mut g, logits);
    let v = nll_graph(&mut g, l, targets, &rows)?;
    Ok(g.scalar(v))
}

/// Mean per-token KL of the plain distribution from the exemplar-prompted one.
pub fn rda_loss(plain: &Tensor, ep: &Tensor) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let (p, rows) = single(&mut g, plain);
    let e = g.constant(ep.clone());
    let v = rda_graph(&mut g, p, e, &rows, true)?;
    Ok(g.scalar(v))
}

/// Same value as [`rda_loss`]; differs only in gradient flow.
pub fn rda_star_loss(plain: &Tensor, ep: &Tensor) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let (p, rows) = single(&mut g, plain);
    let e = g.constant(ep.clone());
    let v = rda_graph(&mut g, p, e, &rows, false)?;
    Ok(g.scalar(v))
}

/// Per-position `softmax(y_pos - y_neg)`.
pub fn margin_distribution(pos: &Tensor, neg: &Tensor) -> Result<Tensor, ObjectiveError> {
    let mut g = Graph::new();
    let (p, n) = (g.constant(pos.clone()), g.constant(neg.clone()));
    let lm = log_margin_graph(&mut g, p, n)?;
    Ok(g.value(lm).map(f64::exp))
}

pub fn crt_loss(pos: &Tensor, neg: &Tensor, targets: &[TokenId]) -> Result<f64, ObjectiveError> {
    let mut g = Graph::new();
    let (p, rows) = single(&mut g, pos);
    let n = g.constant(neg.clone());
    let v = crt_graph(&mut g, p, n, targets, &rows)?;
    Ok(g.scalar(v))
}
