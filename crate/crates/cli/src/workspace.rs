use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vitask::data::{hex_digest, load_feature_table, write_corpus, write_feature_table, Catalog, Split, Vocabulary};
use vitask::models::TsmModel;
use vitask::pipeline::{loss_trace_csv, Checkpoint, PipelineError, TaskData, TrainingConfig};

use crate::Common;

/// What a run read and wrote, with SHA-256 digests. Paths are relative to
/// the run directory unless they point outside it.
#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    options: &'a BTreeMap<String, String>,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: &'a BTreeMap<String, String>,
    outputs: &'a BTreeMap<String, String>,
}

/// One subcommand invocation against a run directory.
pub struct Run {
    pub out: PathBuf,
    pub cfg: TrainingConfig,
    command: String,
    options: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Run {
    /// Resolves the config: `--config`, else `<out>/config.conf`, else the
    /// defaults; `--seed` overrides the seed.
    pub fn new(command: &str, common: &Common, options: BTreeMap<String, String>) -> Result<Self> {
        std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
        let mut run = Self {
            out: common.out.clone(),
            cfg: TrainingConfig::default(),
            command: command.to_string(),
            options,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        };
        let stored = common.out.join("config.conf");
        run.cfg = match &common.config {
            Some(p) => {
                run.record_input(&p.display().to_string(), p)?;
                TrainingConfig::load(p)?
            }
            None if stored.exists() => {
                run.record_input("config.conf", &stored)?;
                TrainingConfig::load(&stored)?
            }
            None => TrainingConfig::default(),
        };
        if let Some(seed) = common.seed {
            run.cfg.seed = seed;
        }
        run.cfg.validate()?;
        Ok(run)
    }

    fn record_input(&mut self, name: &str, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(name.to_string(), hex_digest(&bytes));
        Ok(())
    }

    /// Path of a run-directory artifact that must already exist.
    pub fn input(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(path).into());
        }
        self.record_input(name, &path)?;
        Ok(path)
    }

    /// A file outside the run directory given on the command line.
    pub fn external(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(path.to_path_buf()).into());
        }
        self.record_input(&path.display().to_string(), path)?;
        Ok(path.to_path_buf())
    }

    /// Resolves `name` to `<out>/<name>.json` unless it is already a `.json` path.
    pub fn checkpoint(&mut self, name: &str, vocab: &Vocabulary) -> Result<Checkpoint> {
        let path = if name.ends_with(".json") {
            self.external(Path::new(name))?
        } else {
            self.input(&format!("{name}.json"))?
        };
        Ok(Checkpoint::load(&path, Some(&vocab.hash()))?)
    }

    pub fn output(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.insert(name.to_string(), hex_digest(bytes));
        Ok(())
    }

    /// Writes a file through a library writer, then records it.
    fn output_with(&mut self, name: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        write(&path)?;
        let bytes = std::fs::read(&path).with_context(|| format!("reading back {}", path.display()))?;
        self.outputs.insert(name.to_string(), hex_digest(&bytes));
        Ok(())
    }

    pub fn save_checkpoint(&mut self, name: &str, ckpt: &Checkpoint, with_trace: bool) -> Result<()> {
        let json = serde_json::to_vec(ckpt).context("serializing checkpoint")?;
        self.output(&format!("{name}.json"), &json)?;
        if with_trace {
            self.output(&format!("{name}-trace.csv"), loss_trace_csv(&ckpt.loss_trace).as_bytes())?;
        }
        Ok(())
    }

    pub fn save_tsm(&mut self, name: &str, tsm: &TsmModel) -> Result<()> {
        let json = serde_json::to_vec(tsm).context("serializing TSM")?;
        self.output(name, &json)
    }

    pub fn load_tsm(&mut self, path: PathBuf) -> Result<TsmModel> {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing TSM {}", path.display()))
    }

    /// Writes the split tables and instruction corpora of `task` under `dir`.
    pub fn save_task(&mut self, dir: &str, task: &TaskData) -> Result<()> {
        let parts = [("train", &task.split.train), ("val", &task.split.val), ("test", &task.split.test)];
        for (part, samples) in parts {
            self.output_with(&format!("{dir}/{part}.csv"), |p| Ok(write_feature_table(p, samples)?))?;
            let full = task.records(samples, true)?;
            self.output_with(&format!("{dir}/{part}.jsonl"), |p| Ok(write_corpus(p, &full)?))?;
        }
        for (part, samples) in [("train", &task.split.train), ("test", &task.split.test)] {
            let short = task.records(samples, false)?;
            self.output_with(&format!("{dir}/{part}-incomplete.jsonl"), |p| Ok(write_corpus(p, &short)?))?;
        }
        Ok(())
    }

    /// Reads a task written by [`Run::save_task`], checking the vocabulary.
    pub fn load_task(&mut self, dir: &str) -> Result<TaskData> {
        let catalog = Catalog::builtin();
        let vocab = Vocabulary::read(&self.input("vocab.txt")?)?;
        let mut split = Split::default();
        for (part, slot) in [("train", &mut split.train), ("val", &mut split.val), ("test", &mut split.test)] {
            *slot = load_feature_table(&self.input(&format!("{dir}/{part}.csv"))?, &catalog)?;
        }
        let task = TaskData::from_split(&self.cfg, split)?;
        if task.vocab.hash() != vocab.hash() {
            return Err(PipelineError::VocabMismatch { expected: task.vocab.hash(), found: vocab.hash() }.into());
        }
        if task.split.test.is_empty() || task.split.train.is_empty() {
            bail!("{dir}: train and test splits must be non-empty");
        }
        Ok(task)
    }

    pub fn finish(self) -> Result<()> {
        let manifest = Manifest {
            command: &self.command,
            options: &self.options,
            seed: self.cfg.seed,
            config: self.cfg.to_map(),
            inputs: &self.inputs,
            outputs: &self.outputs,
        };
        let mut json = serde_json::to_vec_pretty(&manifest).context("serializing manifest")?;
        json.push(b'\n');
        let name = format!("manifest-{}.json", self.command);
        let path = self.out.join(&name);
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
