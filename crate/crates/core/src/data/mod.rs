//! Synthetic tasks, instruction formatting, tokenization and sampling.

mod catalog;
mod corpus;
mod instruct;
mod negative;
mod split;
mod synth;
mod table;
mod vocab;

pub use catalog::{Catalog, DatasetSpec};
pub use corpus::{read_corpus, write_corpus, CorpusRow};
pub use instruct::{format_instruction, make_incomplete, render_instruction, InstructionRecord, InstructionTemplate};
pub use negative::{sample_negative, NegativeIndex};
pub use split::{split_dataset, Split, SplitRatios};
pub use synth::{generate_synthetic_task, SynthConfig};
pub use table::{load_feature_table, write_feature_table};
pub use vocab::{hex_digest, split_words, TokenId, Vocabulary};

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One labelled "image": a feature vector tagged with its dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationSample {
    pub sample_id: String,
    pub features: Vec<f64>,
    pub dataset_id: String,
    pub label: usize,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task configuration: {0}")]
    InvalidConfig(String),
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("cannot stratify: class {label} of dataset {dataset} has {count} samples (need at least 3)")]
    CannotStratify { dataset: String, label: usize, count: usize },
    #[error("label {label} is out of range for dataset {dataset}")]
    UnknownLabel { dataset: String, label: usize },
    #[error("unknown dataset_id {0:?}")]
    UnknownDataset(String),
    #[error("class-name list is empty for dataset {0}")]
    EmptyClassNames(String),
    #[error("template must contain exactly one image placeholder")]
    BadTemplate,
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("token id {0} is not in the vocabulary")]
    UnknownTokenId(usize),
    #[error("no valid negative for sample {0}")]
    NoValidNegative(String),
    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}
