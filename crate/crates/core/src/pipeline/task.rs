use super::{PipelineError, TrainingConfig};
use crate::data::{
    format_instruction, generate_synthetic_task, make_incomplete, split_dataset, Catalog, ClassificationSample,
    DatasetSpec, InstructionRecord, InstructionTemplate, Split, Vocabulary,
};
use crate::models::{train_tsm, TsmModel};

/// A classification task with everything needed to render it as
/// instructions: the catalog, template, vocabulary and a stratified split.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub catalog: Catalog,
    pub template: InstructionTemplate,
    pub vocab: Vocabulary,
    pub dataset: DatasetSpec,
    pub split: Split,
}

impl TaskData {
    /// Splits `samples` (all from `cfg.dataset`) with the configured ratios.
    pub fn from_samples(cfg: &TrainingConfig, samples: &[ClassificationSample]) -> Result<Self, PipelineError> {
        Self::from_split(cfg, split_dataset(samples, cfg.split_ratios()?, cfg.seed)?)
    }

    /// Wraps an existing split of `cfg.dataset`.
    pub fn from_split(cfg: &TrainingConfig, split: Split) -> Result<Self, PipelineError> {
        let catalog = Catalog::builtin();
        let template = InstructionTemplate::default();
        let vocab = Vocabulary::build(&catalog, &template);
        let dataset = catalog.get(&cfg.dataset)?.clone();
        let all = split.train.iter().chain(&split.val).chain(&split.test);
        for s in all {
            if s.dataset_id != dataset.id {
                return Err(PipelineError::Config(format!(
                    "sample {} belongs to {}, not {}",
                    s.sample_id, s.dataset_id, dataset.id
                )));
            }
            if s.label >= dataset.num_classes() {
                return Err(PipelineError::Config(format!("sample {} has label {} out of range", s.sample_id, s.label)));
            }
        }
        Ok(Self { catalog, template, vocab, dataset, split })
    }

    /// The configured synthetic task.
    pub fn synthetic(cfg: &TrainingConfig) -> Result<Self, PipelineError> {
        let k = Catalog::builtin().get(&cfg.dataset)?.num_classes();
        Self::from_samples(cfg, &generate_synthetic_task(&cfg.synth(k))?)
    }

    /// The mean-shifted variant of the configured task.
    pub fn shifted(cfg: &TrainingConfig) -> Result<Self, PipelineError> {
        let k = Catalog::builtin().get(&cfg.dataset)?.num_classes();
        Self::from_samples(cfg, &generate_synthetic_task(&cfg.shifted_synth(k))?)
    }

    /// Instruction records, with (`complete`) or without the class list.
    pub fn records(&self, samples: &[ClassificationSample], complete: bool) -> Result<Vec<InstructionRecord>, PipelineError> {
        samples
            .iter()
            .map(|s| {
                let r = format_instruction(s, &self.template, &self.dataset, &self.vocab)?;
                if complete {
                    Ok(r)
                } else {
                    Ok(make_incomplete(&r, &self.template, &self.dataset, &self.vocab)?)
                }
            })
            .collect()
    }

    /// Catalog restricted to this task's dataset, the TSM's label space.
    pub fn tsm_catalog(&self) -> Result<Catalog, PipelineError> {
        Ok(self.catalog.subset(&[self.dataset.id.as_str()])?)
    }

    pub fn train_tsm(&self, cfg: &TrainingConfig) -> Result<TsmModel, PipelineError> {
        Ok(train_tsm(&self.split.train, &self.split.val, &self.tsm_catalog()?, cfg.patches, &cfg.tsm_config())?)
    }

    /// Continues training `base` on this task for `swap_tsm_epochs`, giving
    /// a replacement TSM with the same architecture.
    pub fn fine_tune_tsm(&self, base: &TsmModel, cfg: &TrainingConfig) -> Result<TsmModel, PipelineError> {
        let mut tc = cfg.tsm_config();
        tc.epochs = cfg.swap_tsm_epochs;
        Ok(base.fine_tune(&self.split.train, &self.split.val, &tc)?)
    }
}
