use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vitask::data::{load_feature_table, Catalog, InstructionRecord};
use vitask::evaluation::{
    compute_metrics, metrics_csv, predict_batch, ranking_csv, ranking_pairs, ranking_stats, ranking_svg,
    robustness_experiment, ClassResponses, DecodeMode, MetricsReport, RankingReport,
};
use vitask::models::{EpVariant, PreparedRecord, TsmModel};
use vitask::pipeline::{
    changed_params, run_stage1, run_stage2, run_vanilla, run_warmup, Checkpoint, PipelineError, Stage, TaskData,
};

use crate::{Ep, Method, Mode, Run};

const DATA: &str = "data";
const SHIFTED: &str = "shifted";

pub fn ep_variant(ep: Ep) -> EpVariant {
    match ep {
        Ep::None => EpVariant::None,
        Ep::Cls => EpVariant::Cls,
        Ep::All => EpVariant::All,
        Ep::Rep => EpVariant::Rep,
    }
}

pub fn decode_mode(mode: Mode) -> DecodeMode {
    match mode {
        Mode::Greedy => DecodeMode::Greedy,
        Mode::ClassLikelihood => DecodeMode::ClassLikelihood,
    }
}

fn ep_name(v: EpVariant) -> &'static str {
    match v {
        EpVariant::None => "none",
        EpVariant::Cls => "cls",
        EpVariant::All => "all",
        EpVariant::Rep => "rep",
    }
}

/// Short name of a checkpoint argument: the file stem of a `.json` path.
fn label(checkpoint: &str) -> String {
    if checkpoint.ends_with(".json") {
        Path::new(checkpoint).file_stem().map_or_else(|| checkpoint.to_string(), |s| s.to_string_lossy().into_owned())
    } else {
        checkpoint.to_string()
    }
}

/// Suffix shared by the outputs of one `eval` invocation.
pub fn eval_tag(checkpoint: &str, ep: Ep, mode: Mode, incomplete: bool) -> String {
    let mut tag = format!("{}-ep-{}-{}", label(checkpoint), ep_name(ep_variant(ep)), decode_mode(mode));
    if incomplete {
        tag.push_str("-incomplete");
    }
    tag
}

pub fn prepare_data(mut run: Run, features: Option<PathBuf>) -> Result<()> {
    let task = match features {
        Some(path) => {
            let path = run.external(&path)?;
            let samples = load_feature_table(&path, &Catalog::builtin())?;
            TaskData::from_samples(&run.cfg, &samples)?
        }
        None => TaskData::synthetic(&run.cfg)?,
    };
    let text = run.cfg.to_text();
    run.output("config.conf", text.as_bytes())?;
    run.output("vocab.txt", task.vocab.to_file_string().as_bytes())?;
    run.save_task(DATA, &task)?;
    eprintln!(
        "prepared {}: {} train, {} val, {} test samples",
        task.dataset.id,
        task.split.train.len(),
        task.split.val.len(),
        task.split.test.len()
    );
    run.finish()
}

pub fn train_tsm(mut run: Run) -> Result<()> {
    let task = run.load_task(DATA)?;
    let tsm = task.train_tsm(&run.cfg)?;
    run.save_tsm("tsm.json", &tsm)?;
    let test = &task.split.test;
    let preds = test.iter().map(|s| Ok(Some(tsm.predict(s)?))).collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = test.iter().map(|s| s.label).collect();
    let report = compute_metrics(&preds, &labels, task.dataset.num_classes())?.with_run(false, run.cfg.seed);
    run.output("metrics-tsm.csv", metrics_csv("tsm", &report).as_bytes())?;
    eprintln!("trained TSM {}: test accuracy {:.4}, macro-F1 {:.4}", tsm.hash(), report.accuracy, report.macro_f1);
    run.finish()
}

/// The run's TSM; when `expected` is given it must be the one recorded there.
fn load_run_tsm(run: &mut Run, file: &str, expected: Option<&str>) -> Result<TsmModel> {
    let path = run.input(file)?;
    let tsm = run.load_tsm(path)?;
    if let Some(want) = expected {
        if tsm.hash() != want {
            bail!("{file} has hash {}, but the checkpoint was built with {want}", tsm.hash());
        }
    }
    Ok(tsm)
}

fn warmup(run: &mut Run, task: &TaskData) -> Result<Checkpoint> {
    if run.out.join("warmup.json").exists() {
        let ckpt = run.checkpoint("warmup", &task.vocab)?;
        if ckpt.stage != Stage::Warmup {
            return Err(PipelineError::WrongStage { expected: Stage::Warmup, found: ckpt.stage }.into());
        }
        return Ok(ckpt);
    }
    eprintln!("running warm-up ({} steps)", run.cfg.warmup_steps);
    let ckpt = run_warmup(&task.vocab, &task.catalog, &task.template, &run.cfg)?;
    run.save_checkpoint("warmup", &ckpt, true)?;
    Ok(ckpt)
}

fn last_total(ckpt: &Checkpoint) -> f64 {
    ckpt.loss_trace.last().map_or(f64::NAN, |r| r.total)
}

pub fn train(mut run: Run, method: Method, stage: u8) -> Result<()> {
    let task = run.load_task(DATA)?;
    let train = task.records(&task.split.train, true)?;
    let (name, ckpt) = match (method, stage) {
        (Method::Vanilla, _) => {
            let base = warmup(&mut run, &task)?;
            ("vanilla", run_vanilla(&base, &train, &run.cfg)?)
        }
        (Method::Vitask, 1) => {
            let tsm = load_run_tsm(&mut run, "tsm.json", None)?;
            let base = warmup(&mut run, &task)?;
            ("stage1", run_stage1(&base, &tsm, &train, &run.cfg)?)
        }
        (Method::Vitask, _) => {
            let stage1 = run.checkpoint("stage1", &task.vocab)?;
            let tsm = load_run_tsm(&mut run, "tsm.json", stage1.tsm_hash.as_deref())?;
            ("stage2", run_stage2(&stage1, &tsm, &train, &run.cfg)?)
        }
    };
    run.save_checkpoint(name, &ckpt, true)?;
    eprintln!("{name}: {} epochs, final loss {:.4}", ckpt.epochs_done, last_total(&ckpt));
    run.finish()
}

/// TSM for a checkpoint: `--tsm` if given, else the swapped one it records,
/// else the one it was trained with. `None` for checkpoints without a TSM.
fn checkpoint_tsm(run: &mut Run, ckpt: &Checkpoint, over: Option<&Path>) -> Result<Option<TsmModel>> {
    if let Some(path) = over {
        let path = run.external(path)?;
        let tsm = run.load_tsm(path)?;
        ckpt.swap_tsm(&tsm)?;
        return Ok(Some(tsm));
    }
    match (&ckpt.swapped_tsm_hash, &ckpt.tsm_hash) {
        (Some(h), _) => Ok(Some(load_run_tsm(run, "tsm-swapped.json", Some(h))?)),
        (None, Some(h)) => Ok(Some(load_run_tsm(run, "tsm.json", Some(h))?)),
        (None, None) => Ok(None),
    }
}

fn prepare(records: &[InstructionRecord], ckpt: &Checkpoint, tsm: Option<&TsmModel>) -> Result<Vec<PreparedRecord>> {
    Ok(records.iter().map(|r| PreparedRecord::new(r, &ckpt.model, tsm)).collect::<Result<Vec<_>, _>>()?)
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    sample_id: &'a str,
    label: &'a str,
    prediction: Option<&'a str>,
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    mut run: Run,
    checkpoint: &str,
    ep: Ep,
    mode: Mode,
    incomplete: bool,
    tsm: Option<PathBuf>,
    tag: &str,
) -> Result<()> {
    let base = run.load_task(DATA)?;
    let ckpt = run.checkpoint(checkpoint, &base.vocab)?;
    let variant = ep_variant(ep);
    let tsm = checkpoint_tsm(&mut run, &ckpt, tsm.as_deref())?;
    if !variant.is_none() && tsm.is_none() {
        return Err(PipelineError::MissingTsm.into());
    }
    // a swapped checkpoint is evaluated on the task its TSM was trained for
    let task = if ckpt.swapped_tsm_hash.is_some() { run.load_task(SHIFTED)? } else { base };
    let test = task.records(&task.split.test, !incomplete)?;
    let prepared = prepare(&test, &ckpt, tsm.as_ref())?;
    let classes = ClassResponses::new(&task.dataset, &task.vocab)?;
    let preds = predict_batch(&ckpt.model, &prepared, &classes, decode_mode(mode), variant, run.cfg.max_new_tokens)?;
    let labels: Vec<usize> = test.iter().map(|r| r.label).collect();
    let report = compute_metrics(&preds, &labels, classes.len())?.with_run(!variant.is_none(), run.cfg.seed);

    let mut jsonl = String::new();
    for (r, p) in test.iter().zip(&preds) {
        let row = PredictionRow {
            sample_id: &r.sample_id,
            label: &classes.names[r.label],
            prediction: p.map(|c| classes.names[c].as_str()),
        };
        jsonl.push_str(&serde_json::to_string(&row).context("serializing prediction")?);
        jsonl.push('\n');
    }
    let method = format!("{}-ep-{}", ckpt.stage, ep_name(variant));
    run.output(&format!("metrics-{tag}.csv"), metrics_csv(&method, &report).as_bytes())?;
    run.output(&format!("predictions-{tag}.jsonl"), jsonl.as_bytes())?;
    eprintln!(
        "{method}: accuracy {:.4}, macro-F1 {:.4}, rejected {:.4}",
        report.accuracy, report.macro_f1, report.reject_rate
    );
    run.finish()
}

pub fn density(mut run: Run, checkpoints: &[String], ep: Ep) -> Result<()> {
    let task = run.load_task(DATA)?;
    let test = task.records(&task.split.test, true)?;
    let pairs = ranking_pairs(&test, run.cfg.seed)?;
    let variant = ep_variant(ep);
    let mut panels: Vec<(String, RankingReport)> = Vec::new();
    for name in checkpoints {
        let ckpt = run.checkpoint(name, &task.vocab)?;
        let tsm = if variant.is_none() { None } else { checkpoint_tsm(&mut run, &ckpt, None)? };
        if !variant.is_none() && tsm.is_none() {
            return Err(PipelineError::MissingTsm.into());
        }
        let prepared = prepare(&test, &ckpt, tsm.as_ref())?;
        let report = ranking_stats(&ckpt.model, &prepared, &pairs, variant, run.cfg.histogram_bins)?;
        panels.push((label(name), report));
    }
    let mut summary = String::from("checkpoint,ranking_fraction,separation,pairs\n");
    for (name, report) in &panels {
        run.output(&format!("ranking-{name}.csv"), ranking_csv(report).as_bytes())?;
        writeln!(summary, "{name},{:?},{:?},{}", report.ranking_fraction, report.separation(), report.pos_probs.len())
            .expect("in-memory");
        eprintln!("{name}: ranking fraction {:.4}, separation {:.4}", report.ranking_fraction, report.separation());
    }
    let refs: Vec<(&str, &RankingReport)> = panels.iter().map(|(n, r)| (n.as_str(), r)).collect();
    run.output("density.svg", ranking_svg(&refs).as_bytes())?;
    run.output("density-summary.csv", summary.as_bytes())?;
    run.finish()
}

fn score(
    ckpt: &Checkpoint,
    tsm: &TsmModel,
    test: &[InstructionRecord],
    classes: &ClassResponses,
    mode: DecodeMode,
    variant: EpVariant,
    run: &Run,
) -> Result<MetricsReport> {
    let prepared = prepare(test, ckpt, Some(tsm))?;
    let preds = predict_batch(&ckpt.model, &prepared, classes, mode, variant, run.cfg.max_new_tokens)?;
    let labels: Vec<usize> = test.iter().map(|r| r.label).collect();
    Ok(compute_metrics(&preds, &labels, classes.len())?.with_run(!variant.is_none(), run.cfg.seed))
}

pub fn swap_tsm(mut run: Run, checkpoint: &str, tsm: Option<PathBuf>, mode: Mode) -> Result<()> {
    let base = run.load_task(DATA)?;
    let ckpt = run.checkpoint(checkpoint, &base.vocab)?;
    let Some(trained_with) = ckpt.tsm_hash.clone() else {
        return Err(PipelineError::MissingTsm.into());
    };
    if ckpt.swapped_tsm_hash.is_some() {
        bail!("{checkpoint} already has a swapped TSM; swap from the original checkpoint");
    }
    let original = load_run_tsm(&mut run, "tsm.json", Some(&trained_with))?;
    let shifted = TaskData::shifted(&run.cfg)?;
    run.save_task(SHIFTED, &shifted)?;
    let replacement = match tsm {
        Some(path) => {
            let path = run.external(&path)?;
            run.load_tsm(path)?
        }
        None => shifted.fine_tune_tsm(&original, &run.cfg)?,
    };
    run.save_tsm("tsm-swapped.json", &replacement)?;
    let swapped = ckpt.swap_tsm(&replacement)?;
    let changed = changed_params(&ckpt.model, &swapped.model);
    if !changed.is_empty() {
        bail!("plug-swap changed decoder parameters: {}", changed.join(", "));
    }
    let name = format!("{}-swapped", label(checkpoint));
    run.save_checkpoint(&name, &swapped, false)?;

    let variant = if ckpt.ep_variant.is_none() { run.cfg.ep_variant } else { ckpt.ep_variant };
    let test = shifted.records(&shifted.split.test, true)?;
    let classes = ClassResponses::new(&shifted.dataset, &shifted.vocab)?;
    let mode = decode_mode(mode);
    let mut csv = String::from("tsm,tsm_hash,ep,accuracy,macro_f1,reject_rate,changed_params\n");
    for (which, t) in [("original", &original), ("swapped", &replacement)] {
        let m = score(&ckpt, t, &test, &classes, mode, variant, &run)?;
        writeln!(csv, "{which},{},{},{:?},{:?},{:?},{}", t.hash(), ep_name(variant), m.accuracy, m.macro_f1, m.reject_rate, changed.len())
            .expect("in-memory");
        eprintln!("{which} TSM on the shifted task: accuracy {:.4}, macro-F1 {:.4}", m.accuracy, m.macro_f1);
    }
    run.output("plug-swap.csv", csv.as_bytes())?;
    run.finish()
}

pub fn robustness(mut run: Run, mode: Mode) -> Result<()> {
    let task = run.load_task(DATA)?;
    let base = run.checkpoint("warmup", &task.vocab)?;
    if base.stage != Stage::Warmup {
        return Err(PipelineError::WrongStage { expected: Stage::Warmup, found: base.stage }.into());
    }
    let tsm = load_run_tsm(&mut run, "tsm.json", None)?;
    let rows = robustness_experiment(&run.cfg, &task, &base, &tsm, decode_mode(mode))?;
    let mut csv = String::from("method,full_accuracy,full_macro_f1,incomplete_accuracy,incomplete_macro_f1,f1_drop\n");
    for row in &rows {
        writeln!(
            csv,
            "{},{:?},{:?},{:?},{:?},{:?}",
            row.method,
            row.full.accuracy,
            row.full.macro_f1,
            row.incomplete.accuracy,
            row.incomplete.macro_f1,
            row.f1_drop()
        )
        .expect("in-memory");
        for (kind, report) in [("full", &row.full), ("incomplete", &row.incomplete)] {
            let method = format!("{}-{kind}", row.method);
            run.output(&format!("metrics-robustness-{method}.csv"), metrics_csv(&method, report).as_bytes())?;
        }
        eprintln!("{}: macro-F1 {:.4} full, {:.4} incomplete", row.method, row.full.macro_f1, row.incomplete.macro_f1);
    }
    run.output("robustness.csv", csv.as_bytes())?;
    run.finish()
}
