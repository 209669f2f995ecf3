use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, InstructionRecord};

/// One line of the instruction corpus JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRow {
    pub sample_id: String,
    pub dataset_id: String,
    pub label: usize,
    pub instruction: String,
    pub response: String,
}

impl From<&InstructionRecord> for CorpusRow {
    fn from(r: &InstructionRecord) -> Self {
        Self {
            sample_id: r.sample_id.clone(),
            dataset_id: r.dataset_id.clone(),
            label: r.label,
            instruction: r.instruction.clone(),
            response: r.response.clone(),
        }
    }
}

pub fn write_corpus(path: &Path, records: &[InstructionRecord]) -> Result<(), DataError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, &CorpusRow::from(r)).expect("corpus rows serialize");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    f.write_all(&buf).map_err(|e| DataError::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRow>, DataError> {
    let f = std::fs::File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            path: path.to_path_buf(),
            line: i as u64 + 1,
            msg: e.to_string(),
        })?;
        out.push(row);
    }
    Ok(out)
}
