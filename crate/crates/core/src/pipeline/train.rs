use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::checkpoint::{Checkpoint, RngState, RngStates, Stage, TraceRow, CHECKPOINT_FORMAT, EXEMPLAR_POSITION};
use super::{optimizer_step, AdamState, PipelineError, TrainingConfig};
use crate::data::{Catalog, InstructionRecord, InstructionTemplate, NegativeIndex, Vocabulary};
use crate::models::{set_trainable, EpVariant, PreparedRecord, TrainPhase, TsmModel, VlmModel};
use crate::numerics::{Graph, Tensor, Var};
use crate::objectives::{crt_graph, nll_graph, rda_graph, stage_total_graph};

/// Which loss a training loop minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Plain NLL only.
    Vanilla,
    /// `van + ep + alpha*rda`.
    Stage1,
    /// `van + ep + alpha*rda + beta*crt`.
    Stage2,
}

/// A training loop: what to optimize, which groups move, for how long.
#[derive(Clone, Copy, Debug)]
pub struct LoopSpec {
    pub objective: Objective,
    pub phase: TrainPhase,
    pub epochs: usize,
    /// Stage recorded in the resulting checkpoint.
    pub stage: Stage,
}

/// Generic instruction-following corpus for the warm-up: each prompt lists a
/// random subset of class names from the whole catalog under a random
/// modality, and the response is one of the listed names, chosen uniformly.
/// Images are unit Gaussian noise.
pub fn warmup_corpus(
    catalog: &Catalog,
    template: &InstructionTemplate,
    vocab: &Vocabulary,
    n: usize,
    input_dim: usize,
    seed: u64,
) -> Result<Vec<InstructionRecord>, PipelineError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7761_726d);
    let names = catalog.all_class_names();
    let datasets = catalog.datasets();
    if names.len() < 2 || datasets.is_empty() {
        return Err(PipelineError::Config("warm-up needs at least two class names".into()));
    }
    let max_k = names.len().min(8);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let modality = &datasets[rng.random_range(0..datasets.len())].modality;
        let k = rng.random_range(2..=max_k);
        let picked: Vec<&str> = index::sample(&mut rng, names.len(), k).iter().map(|j| names[j]).collect();
        let answer = rng.random_range(0..k);
        let instruction = template.instruction(modality, Some(&picked));
        let instruction_tokens = vocab.encode(&template.prompt_text(&instruction))?;
        let response = picked[answer].to_string();
        let mut response_tokens = vocab.encode(&response)?;
        response_tokens.push(Vocabulary::EOS);
        let image_features = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
        out.push(InstructionRecord {
            sample_id: format!("warmup-{i:06}"),
            image_features,
            dataset_id: "warmup".into(),
            label: answer,
            instruction,
            instruction_tokens,
            response,
            response_tokens,
        });
    }
    Ok(out)
}

/// Builds the base decoder and trains it on [`warmup_corpus`]. Only base
/// parameters move, and their visual-channel entries stay zero.
pub fn run_warmup(
    vocab: &Vocabulary,
    catalog: &Catalog,
    template: &InstructionTemplate,
    cfg: &TrainingConfig,
) -> Result<Checkpoint, PipelineError> {
    cfg.validate()?;
    let mut model = VlmModel::new(cfg.dims(), vocab.len(), cfg.seed)?;
    let n = cfg.warmup_steps * cfg.warmup_batch_size;
    let corpus = warmup_corpus(catalog, template, vocab, n, cfg.input_dim, cfg.seed)?;
    let prepared =
        corpus.iter().map(|r| PreparedRecord::new(r, &model, None)).collect::<Result<Vec<_>, _>>()?;
    set_trainable(&mut model, TrainPhase::Warmup);
    let adam_cfg = cfg.adam(cfg.warmup_lr);
    let mut adam = AdamState::default();
    let mut trace = Vec::with_capacity(cfg.warmup_steps);
    for (step, batch) in prepared.chunks(cfg.warmup_batch_size).enumerate() {
        let mut g = Graph::new();
        let items: Vec<_> = batch.iter().map(|r| r.teacher_forced()).collect();
        let out = model.forward(&mut g, &items, EpVariant::None, false)?;
        let targets: Vec<usize> = batch.iter().flat_map(|r| r.response.iter().copied()).collect();
        let loss = nll_graph(&mut g, out.logits, &targets, &out.rows)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(non_finite(Stage::Warmup, 1, step, batch.iter()));
        }
        let mut grads = g.backward(loss)?.into_params();
        model.mask_gradients(&mut grads);
        optimizer_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
        trace.push(TraceRow { step: step as u64 + 1, epoch: 1, van: value, ep: 0.0, rda: 0.0, crt: 0.0, total: value });
    }
    set_trainable(&mut model, TrainPhase::Frozen);
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT,
        stage: Stage::Warmup,
        vocab_hash: vocab.hash(),
        ep_variant: EpVariant::None,
        exemplar_position: EXEMPLAR_POSITION.into(),
        config: cfg.to_map(),
        tsm_hash: None,
        swapped_tsm_hash: None,
        rng: RngStates::fresh(cfg.seed),
        optimizer: adam,
        epochs_done: 0,
        loss_trace: trace,
        model,
    })
}

fn non_finite<'a>(stage: Stage, epoch: usize, batch: usize, recs: impl Iterator<Item = &'a PreparedRecord>) -> PipelineError {
    PipelineError::NonFiniteLoss { stage, epoch, batch, sample_ids: recs.map(|r| r.sample_id.clone()).collect() }
}

/// Stage 1 from a warm-up checkpoint: task connector and adapters learn
/// `van + ep + alpha*rda`. Optimizer state and random streams start fresh.
pub fn run_stage1(
    warmup: &Checkpoint,
    tsm: &TsmModel,
    train: &[InstructionRecord],
    cfg: &TrainingConfig,
) -> Result<Checkpoint, PipelineError> {
    if warmup.stage != Stage::Warmup {
        return Err(PipelineError::WrongStage { expected: Stage::Warmup, found: warmup.stage });
    }
    let mut start = warmup.clone();
    start.optimizer = AdamState::default();
    start.rng = RngStates::fresh(cfg.seed);
    start.loss_trace.clear();
    start.epochs_done = 0;
    let spec =
        LoopSpec { objective: Objective::Stage1, phase: TrainPhase::Stage1, epochs: cfg.epochs_stage1, stage: Stage::Stage1 };
    train_loop(&start, Some(tsm), train, cfg, &spec)
}

/// Stage 2 from a stage-1 checkpoint: adapters only, with the contrastive
/// term added. Optimizer state, random streams and the trace carry over.
pub fn run_stage2(
    stage1: &Checkpoint,
    tsm: &TsmModel,
    train: &[InstructionRecord],
    cfg: &TrainingConfig,
) -> Result<Checkpoint, PipelineError> {
    if stage1.stage != Stage::Stage1 {
        return Err(PipelineError::WrongStage { expected: Stage::Stage1, found: stage1.stage });
    }
    let spec =
        LoopSpec { objective: Objective::Stage2, phase: TrainPhase::Stage2, epochs: cfg.epochs_stage2, stage: Stage::Stage2 };
    train_loop(stage1, Some(tsm), train, cfg, &spec)
}

/// The vanilla baseline: adapters learn plain NLL for as many epochs as both
/// VITask stages together.
pub fn run_vanilla(
    warmup: &Checkpoint,
    train: &[InstructionRecord],
    cfg: &TrainingConfig,
) -> Result<Checkpoint, PipelineError> {
    if warmup.stage != Stage::Warmup {
        return Err(PipelineError::WrongStage { expected: Stage::Warmup, found: warmup.stage });
    }
    let mut start = warmup.clone();
    start.optimizer = AdamState::default();
    start.rng = RngStates::fresh(cfg.seed);
    start.loss_trace.clear();
    start.epochs_done = 0;
    let spec = LoopSpec {
        objective: Objective::Vanilla,
        phase: TrainPhase::Vanilla,
        epochs: cfg.epochs_stage1 + cfg.epochs_stage2,
        stage: Stage::Vanilla,
    };
    train_loop(&start, None, train, cfg, &spec)
}

/// Runs `spec.epochs` epochs from `from`, continuing its optimizer state,
/// random streams and loss trace.
pub fn train_loop(
    from: &Checkpoint,
    tsm: Option<&TsmModel>,
    train: &[InstructionRecord],
    cfg: &TrainingConfig,
    spec: &LoopSpec,
) -> Result<Checkpoint, PipelineError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PipelineError::Config("training set is empty".into()));
    }
    let uses_ep = spec.objective != Objective::Vanilla;
    let variant = if uses_ep { cfg.ep_variant } else { EpVariant::None };
    if uses_ep && variant.is_none() {
        return Err(PipelineError::Config("exemplar-prompted training needs ep_variant cls, all or rep".into()));
    }
    let tsm = if uses_ep { Some(tsm.ok_or(PipelineError::MissingTsm)?) } else { None };
    let negatives = match spec.objective {
        Objective::Stage2 => Some(NegativeIndex::new(train)?),
        _ => None,
    };

    let mut model = from.model.clone();
    set_trainable(&mut model, spec.phase);
    let prepared = train.iter().map(|r| PreparedRecord::new(r, &model, tsm)).collect::<Result<Vec<_>, _>>()?;
    let mut shuffle = from.rng.shuffle.restore()?;
    let mut neg_rng = from.rng.negatives.restore()?;
    let mut adam = from.optimizer.clone();
    let adam_cfg = cfg.adam(cfg.learning_rate);
    let mut trace = from.loss_trace.clone();
    let mut step = trace.last().map_or(0, |r| r.step);
    for e in 0..spec.epochs {
        let epoch = from.epochs_done + e + 1;
        // each epoch permutes the identity, so a resumed run sees the same order
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut shuffle);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let negs: Option<Vec<usize>> =
                negatives.as_ref().map(|index| chunk.iter().map(|&i| index.draw(i, &mut neg_rng)).collect());
            let mut g = Graph::new();
            let terms = batch_objective(&mut g, &model, &prepared, chunk, negs.as_deref(), spec.objective, variant, cfg)?;
            let row = terms.row(&g, step + 1, epoch);
            if !row.total.is_finite() {
                return Err(non_finite(spec.stage, epoch, b, chunk.iter().map(|&i| &prepared[i])));
            }
            let grads = g.backward(terms.total)?.into_params();
            debug_assert!(
                grads.keys().all(|k| model.is_trainable(k)),
                "gradient reached a frozen parameter: {:?}",
                grads.keys().filter(|k| !model.is_trainable(k)).collect::<Vec<_>>()
            );
            optimizer_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
            step += 1;
            trace.push(row);
        }
    }

    set_trainable(&mut model, TrainPhase::Frozen);
    Ok(Checkpoint {
        format: CHECKPOINT_FORMAT,
        stage: spec.stage,
        vocab_hash: from.vocab_hash.clone(),
        ep_variant: variant,
        exemplar_position: EXEMPLAR_POSITION.into(),
        config: cfg.to_map(),
        tsm_hash: tsm.map(|t| t.hash()),
        swapped_tsm_hash: None,
        rng: RngStates { shuffle: RngState::capture(&shuffle), negatives: RngState::capture(&neg_rng) },
        optimizer: adam,
        epochs_done: from.epochs_done + spec.epochs,
        loss_trace: trace,
        model,
    })
}

/// Graph nodes of one batch's loss terms.
pub struct BatchTerms {
    pub van: Var,
    pub ep: Option<Var>,
    pub rda: Option<Var>,
    pub crt: Option<Var>,
    pub total: Var,
}

impl BatchTerms {
    fn row(&self, g: &Graph, step: u64, epoch: usize) -> TraceRow {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v));
        TraceRow {
            step,
            epoch,
            van: g.scalar(self.van),
            ep: val(self.ep),
            rda: val(self.rda),
            crt: val(self.crt),
            total: g.scalar(self.total),
        }
    }
}

/// Builds one batch's loss. `negatives[k]` is the index of the record whose
/// image serves as the negative for `batch[k]`; it is required for stage 2.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    g: &mut Graph,
    model: &VlmModel,
    records: &[PreparedRecord],
    batch: &[usize],
    negatives: Option<&[usize]>,
    objective: Objective,
    variant: EpVariant,
    cfg: &TrainingConfig,
) -> Result<BatchTerms, PipelineError> {
    let recs: Vec<&PreparedRecord> = batch.iter().map(|&i| &records[i]).collect();
    let targets: Vec<usize> = recs.iter().flat_map(|r| r.response.iter().copied()).collect();
    let items: Vec<_> = recs.iter().map(|r| r.teacher_forced()).collect();
    let plain = model.forward(g, &items, EpVariant::None, true)?;
    let rows = plain.rows.clone();
    let van = nll_graph(g, plain.logits, &targets, &rows)?;
    if objective == Objective::Vanilla {
        return Ok(BatchTerms { van, ep: None, rda: None, crt: None, total: van });
    }

    let epf = model.forward(g, &items, variant, true)?;
    let ep = nll_graph(g, epf.logits, &targets, &rows)?;
    let rda = rda_graph(g, plain.logits, epf.logits, &rows, true)?;
    let mut crt = None;
    if objective == Objective::Stage2 && cfg.beta != 0.0 {
        let negs = negatives.ok_or_else(|| PipelineError::Config("stage 2 needs negatives".into()))?;
        if negs.len() != batch.len() {
            return Err(PipelineError::Config(format!("{} negatives for {} anchors", negs.len(), batch.len())));
        }
        // the anchor's response, teacher-forced on the negative's image
        let neg_items: Vec<_> =
            recs.iter().zip(negs).map(|(r, &j)| records[j].with_response(&r.response)).collect();
        let neg_plain = model.forward(g, &neg_items, EpVariant::None, true)?;
        let crt_plain = crt_graph(g, plain.logits, neg_plain.logits, &targets, &rows)?;
        let neg_ep = model.forward(g, &neg_items, variant, true)?;
        let crt_ep = crt_graph(g, epf.logits, neg_ep.logits, &targets, &rows)?;
        let sum = g.add(crt_plain, crt_ep)?;
        crt = Some(g.scale(sum, 0.5));
    }
    let stage = if objective == Objective::Stage2 { 2 } else { 1 };
    let total = stage_total_graph(g, stage, van, Some(ep), Some(rda), crt, cfg.alpha, cfg.beta)?;
    Ok(BatchTerms { van, ep: Some(ep), rda: Some(rda), crt, total })
}

/// Parameters whose values differ between two models.
pub fn changed_params(a: &VlmModel, b: &VlmModel) -> Vec<String> {
    let empty = Tensor::zeros(&[0]);
    let mut out: Vec<String> =
        a.params.iter().filter(|(k, v)| b.params.get(*k).unwrap_or(&empty) != *v).map(|(k, _)| k.clone()).collect();
    out.extend(b.params.keys().filter(|k| !a.params.contains_key(*k)).cloned());
    out
}
