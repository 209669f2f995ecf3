//! Classification metrics, response ranking, robustness study and reports.

mod metrics;
mod predict;
mod ranking;
mod report;
mod robustness;

pub use metrics::{compute_metrics, ClassMetrics, MetricsReport, Prediction};
pub use predict::{
    class_log_likelihoods, evaluate, greedy_decode, predict, predict_batch, ClassResponses, DecodeMode,
};
pub use ranking::{mean_token_prob, ranking_pairs, ranking_stats, RankingReport};
pub use report::{
    metrics_csv, parse_metrics_csv, parse_ranking_csv, ranking_csv, ranking_svg, write_report,
};
pub use robustness::{robustness_experiment, RobustnessRow};

use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::models::ModelError;
use crate::numerics::NumericsError;
use crate::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("pair ({0}, {1}) does not share an instruction")]
    BadPair(String, String),
    #[error("report parse error: {0}")]
    Parse(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}
