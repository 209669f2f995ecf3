use serde::{Deserialize, Serialize};

use super::{evaluate, ClassResponses, DecodeMode, EvalError, MetricsReport};
use crate::models::{EpVariant, PreparedRecord, TsmModel};
use crate::pipeline::{run_stage1, run_stage2, run_vanilla, Checkpoint, TaskData, TrainingConfig};

/// One method trained and tested with full and with incomplete instructions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub method: String,
    pub full: MetricsReport,
    pub incomplete: MetricsReport,
}

impl RobustnessRow {
    /// Macro-F1 lost by dropping the class list.
    pub fn f1_drop(&self) -> f64 {
        self.full.macro_f1 - self.incomplete.macro_f1
    }
}

/// Trains the vanilla baseline and VITask (evaluated without exemplars) on
/// full and on incomplete instructions from the same warm-up, TSM and seed,
/// and evaluates each on test instructions of the same kind.
pub fn robustness_experiment(
    cfg: &TrainingConfig,
    task: &TaskData,
    warmup: &Checkpoint,
    tsm: &TsmModel,
    mode: DecodeMode,
) -> Result<Vec<RobustnessRow>, EvalError> {
    let classes = ClassResponses::new(&task.dataset, &task.vocab)?;
    let mut vanilla = Vec::new();
    let mut vitask = Vec::new();
    for complete in [true, false] {
        let train = task.records(&task.split.train, complete)?;
        let test = task.records(&task.split.test, complete)?;
        let v = run_vanilla(warmup, &train, cfg)?;
        let s1 = run_stage1(warmup, tsm, &train, cfg)?;
        let s2 = run_stage2(&s1, tsm, &train, cfg)?;
        let prep = |m: &Checkpoint| {
            test.iter().map(|r| PreparedRecord::new(r, &m.model, Some(tsm))).collect::<Result<Vec<_>, _>>()
        };
        let run = |m: &Checkpoint| -> Result<MetricsReport, EvalError> {
            evaluate(&m.model, &prep(m)?, &classes, mode, EpVariant::None, cfg.max_new_tokens, cfg.seed)
        };
        vanilla.push(run(&v)?);
        vitask.push(run(&s2)?);
    }
    let row = |method: &str, mut r: Vec<MetricsReport>| {
        let incomplete = r.pop().expect("two runs");
        let full = r.pop().expect("two runs");
        RobustnessRow { method: method.into(), full, incomplete }
    };
    Ok(vec![row("vanilla", vanilla), row("vitask", vitask)])
}
