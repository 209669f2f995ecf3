use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{encode_image, extract_exemplar, ExemplarFeatures, FrozenEncoder, ModelDims, ModelError, TsmModel};
use crate::data::{InstructionRecord, TokenId, Vocabulary};
use crate::numerics::{Graph, Tensor, Var};

/// How exemplar features enter the visual prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpVariant {
    /// No exemplar.
    None,
    /// One CLS exemplar after the image embeddings.
    Cls,
    /// One exemplar per patch after the image embeddings.
    All,
    /// Patch exemplars in place of the image embeddings.
    Rep,
}

impl EpVariant {
    pub fn is_none(self) -> bool {
        self == EpVariant::None
    }

    /// Exemplar rows added to (or, for `Rep`, substituted into) the prefix.
    pub fn exemplar_rows(self, patches: usize) -> usize {
        match self {
            EpVariant::None => 0,
            EpVariant::Cls => 1,
            EpVariant::All | EpVariant::Rep => patches,
        }
    }
}

impl fmt::Display for EpVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EpVariant::None => "none",
            EpVariant::Cls => "cls",
            EpVariant::All => "all",
            EpVariant::Rep => "rep",
        })
    }
}

impl FromStr for EpVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(EpVariant::None),
            "cls" => Ok(EpVariant::Cls),
            "all" => Ok(EpVariant::All),
            "rep" => Ok(EpVariant::Rep),
            other => Err(format!("unknown exemplar variant {other:?} (expected none, cls, all or rep)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Base,
    VlConnector,
    TaskConnector,
    Adapter,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("vl.") {
            ParamGroup::VlConnector
        } else if name.starts_with("tc.") {
            ParamGroup::TaskConnector
        } else if name.starts_with("lora.") {
            ParamGroup::Adapter
        } else {
            ParamGroup::Base
        }
    }
}

/// Which parameter groups a training phase updates. The encoder and the
/// vision-language connector are frozen in every phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Frozen,
    /// Base decoder pre-training on the generic corpus.
    Warmup,
    /// Task connector and adapters.
    Stage1,
    /// Adapters only.
    Stage2,
    /// Adapters only, no exemplars.
    Vanilla,
}

impl TrainPhase {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            TrainPhase::Frozen => &[],
            TrainPhase::Warmup => &[ParamGroup::Base],
            TrainPhase::Stage1 => &[ParamGroup::TaskConnector, ParamGroup::Adapter],
            TrainPhase::Stage2 | TrainPhase::Vanilla => &[ParamGroup::Adapter],
        }
    }
}

/// The toy VLM: frozen encoder, frozen vision-language connector, learnable
/// task connector, causal decoder and low-rank adapters on the query and
/// value projections.
///
/// The decoder has no layer normalization. Image embeddings are written only
/// into the trailing `d_visual` residual columns, and every base weight that
/// reads the residual stream has zero rows there, so without adapters the
/// decoder's output does not depend on the image at all.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VlmModel {
    pub dims: ModelDims,
    pub vocab_size: usize,
    pub encoder: FrozenEncoder,
    pub params: BTreeMap<String, Tensor>,
    #[serde(skip)]
    trainable: BTreeSet<ParamGroup>,
}

/// Reads the residual stream: rows in the visual channel stay zero.
const READERS: [&str; 4] = ["wq", "wk", "wv", "w1"];
/// Writes the residual stream: columns in the visual channel stay zero.
const WRITERS: [&str; 2] = ["wo", "w2"];

impl VlmModel {
    pub fn new(dims: ModelDims, vocab_size: usize, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lora_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c6f_7261);
        let d = dims.d_model;
        let mut params = BTreeMap::new();
        let gauss = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            let n = Normal::new(0.0, std).expect("valid std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| n.sample(rng)).collect()).expect("sized")
        };
        let res = 1.0 / (2.0 * dims.layers as f64).sqrt();
        params.insert("tok_emb".into(), gauss(&mut rng, vocab_size, d, 0.5));
        params.insert("pos_emb".into(), gauss(&mut rng, dims.max_len, d, 0.5));
        for l in 0..dims.layers {
            for (w, b) in [("wq", "bq"), ("wk", "bk"), ("wv", "bv")] {
                params.insert(format!("l{l}.{w}"), gauss(&mut rng, d, d, 1.0 / (d as f64).sqrt()));
                params.insert(format!("l{l}.{b}"), Tensor::zeros(&[d]));
            }
            params.insert(format!("l{l}.wo"), gauss(&mut rng, d, d, res / (d as f64).sqrt()));
            params.insert(format!("l{l}.bo"), Tensor::zeros(&[d]));
            params.insert(format!("l{l}.w1"), gauss(&mut rng, d, dims.ff, 1.0 / (d as f64).sqrt()));
            params.insert(format!("l{l}.b1"), Tensor::zeros(&[dims.ff]));
            params.insert(format!("l{l}.w2"), gauss(&mut rng, dims.ff, d, res / (dims.ff as f64).sqrt()));
            params.insert(format!("l{l}.b2"), Tensor::zeros(&[d]));
        }
        params.insert("head.w".into(), gauss(&mut rng, d, vocab_size, 1.0 / (d as f64).sqrt()));
        params.insert("head.b".into(), Tensor::zeros(&[vocab_size]));

        let mut vl = gauss(&mut rng, dims.d_v, d, 1.0 / (dims.d_v as f64).sqrt());
        let vs = dims.visual_start();
        for (j, v) in vl.data_mut().iter_mut().enumerate() {
            if j % d < vs {
                *v = 0.0;
            }
        }
        params.insert("vl.w".into(), vl);
        params.insert("vl.b".into(), Tensor::zeros(&[d]));

        let tc_std = 0.5 / (dims.d_t as f64).sqrt();
        if dims.tc_layers == 1 {
            params.insert("tc.w".into(), gauss(&mut rng, dims.d_t, d, tc_std));
            params.insert("tc.b".into(), Tensor::zeros(&[d]));
        } else {
            params.insert("tc.w".into(), gauss(&mut rng, dims.d_t, d, 1.0 / (dims.d_t as f64).sqrt()));
            params.insert("tc.b".into(), Tensor::zeros(&[d]));
            params.insert("tc.w2".into(), gauss(&mut rng, d, d, 0.5 / (d as f64).sqrt()));
            params.insert("tc.b2".into(), Tensor::zeros(&[d]));
        }

        for l in 0..dims.layers {
            for which in ["q", "v"] {
                let a = gauss(&mut lora_rng, d, dims.lora_rank, 1.0 / (d as f64).sqrt());
                params.insert(format!("lora.l{l}.{which}.a"), a);
                params.insert(format!("lora.l{l}.{which}.b"), Tensor::zeros(&[dims.lora_rank, d]));
            }
        }
        let encoder = FrozenEncoder::new(dims.input_dim, dims.patches, dims.d_v, seed ^ 0x656e_6364);
        let mut model = Self { dims, vocab_size, encoder, params, trainable: BTreeSet::new() };
        let names: Vec<String> = model.params.keys().cloned().collect();
        for name in names {
            if let Some(mut t) = model.params.remove(&name) {
                model.apply_mask(&name, &mut t);
                model.params.insert(name, t);
            }
        }
        Ok(model)
    }

    /// Zeroes the entries of a base tensor (or its gradient) that would let
    /// the base decoder read from or write to the visual channel.
    pub fn apply_mask(&self, name: &str, t: &mut Tensor) {
        if ParamGroup::of(name) != ParamGroup::Base {
            return;
        }
        let d = self.dims.d_model;
        let vs = self.dims.visual_start();
        let leaf = name.rsplit('.').next().unwrap_or(name);
        let cols = t.last_dim();
        let data = t.data_mut();
        if READERS.contains(&leaf) || name == "head.w" {
            data[vs * cols..d * cols].iter_mut().for_each(|v| *v = 0.0);
        } else if WRITERS.contains(&leaf) || name == "tok_emb" || name == "pos_emb" {
            for row in data.chunks_mut(cols) {
                row[vs..].iter_mut().for_each(|v| *v = 0.0);
            }
        } else if leaf == "bo" || leaf == "b2" {
            data[vs..].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn mask_gradients(&self, grads: &mut BTreeMap<String, Tensor>) {
        for (name, g) in grads.iter_mut() {
            self.apply_mask(name, g);
        }
    }

    pub fn trainable_groups(&self) -> &BTreeSet<ParamGroup> {
        &self.trainable
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.trainable.contains(&ParamGroup::of(name))
    }

    fn var(&self, g: &mut Graph, name: &str) -> Var {
        g.input(name, self.is_trainable(name), || self.params[name].clone())
    }

    /// Length of the prefix (everything before the response) for a prompt of
    /// `prompt_len` tokens including the single `<image>` placeholder.
    pub fn prefix_len(&self, prompt_len: usize, variant: EpVariant) -> usize {
        let p = self.dims.patches;
        let visual = match variant {
            EpVariant::Rep => p,
            v => p + v.exemplar_rows(p),
        };
        prompt_len - 1 + visual
    }

    fn task_connector(&self, g: &mut Graph, ex: Var) -> Result<Var, ModelError> {
        let (w, b) = (self.var(g, "tc.w"), self.var(g, "tc.b"));
        let h = g.affine(ex, w, b)?;
        if self.dims.tc_layers == 1 {
            return Ok(h);
        }
        let h = g.gelu(h);
        let (w2, b2) = (self.var(g, "tc.w2"), self.var(g, "tc.b2"));
        Ok(g.affine(h, w2, b2)?)
    }

    fn projection(&self, g: &mut Graph, h: Var, l: usize, which: &str, adapters_on: bool) -> Result<Var, ModelError> {
        let (w, b) = (self.var(g, &format!("l{l}.w{which}")), self.var(g, &format!("l{l}.b{which}")));
        let base = g.affine(h, w, b)?;
        let key = format!("lora.l{l}.{which}.a");
        if !adapters_on || !self.params.contains_key(&key) {
            return Ok(base);
        }
        let a = self.var(g, &key);
        let bb = self.var(g, &format!("lora.l{l}.{which}.b"));
        let low = g.matmul(h, a)?;
        let delta = g.matmul(low, bb)?;
        Ok(g.add(base, delta)?)
    }

    /// Teacher-forced forward over a packed batch.
    ///
    /// Each item is laid out as prompt (with the image placeholder expanded
    /// into patch embeddings and exemplar rows) followed by `cont`. Logit
    /// rows are returned for the last `cont.len() + 1` positions of every
    /// item, i.e. the predictions of each continuation token and of the token
    /// after it.
    pub fn forward(
        &self,
        g: &mut Graph,
        items: &[SeqInput<'_>],
        variant: EpVariant,
        adapters_on: bool,
    ) -> Result<ForwardOut, ModelError> {
        let d = self.dims.d_model;
        let p = self.dims.patches;
        let mut ids: Vec<usize> = Vec::new();
        let mut pos: Vec<usize> = Vec::new();
        let mut slot_kind: Vec<Slot> = Vec::new();
        let mut img_rows: Vec<f64> = Vec::new();
        let mut ex_rows: Vec<f64> = Vec::new();
        let (mut n_img, mut n_ex) = (0usize, 0usize);
        let mut segments = Vec::with_capacity(items.len());
        let mut out_rows = Vec::new();
        let mut rows = Vec::with_capacity(items.len());
        for item in items {
            let ex = match (variant, item.exemplar) {
                (EpVariant::None, _) => None,
                (v, None) => return Err(ModelError::MissingTsm(v)),
                (_, Some(e)) => Some(e),
            };
            if item.patches.shape() != [p, self.dims.d_v] {
                return Err(ModelError::DimMismatch(format!(
                    "patch embeddings {:?}, expected [{p}, {}]",
                    item.patches.shape(),
                    self.dims.d_v
                )));
            }
            let start = ids.len();
            for &t in item.prompt {
                if t >= self.vocab_size {
                    return Err(crate::data::DataError::UnknownTokenId(t).into());
                }
                if t != Vocabulary::IMAGE {
                    ids.push(t);
                    slot_kind.push(Slot::Token);
                    continue;
                }
                if variant != EpVariant::Rep {
                    for r in 0..p {
                        ids.push(Vocabulary::IMAGE);
                        slot_kind.push(Slot::Image(n_img));
                        img_rows.extend_from_slice(item.patches.row(r));
                        n_img += 1;
                    }
                }
                if let Some(e) = ex {
                    let rows: Vec<&[f64]> = match variant {
                        EpVariant::Cls => vec![e.cls.as_slice()],
                        _ => (0..e.patches.rows()).map(|r| e.patches.row(r)).collect(),
                    };
                    for r in rows {
                        if r.len() != self.dims.d_t {
                            return Err(ModelError::DimMismatch(format!(
                                "exemplar width {}, task connector expects {}",
                                r.len(),
                                self.dims.d_t
                            )));
                        }
                        ids.push(Vocabulary::EXEMPLAR);
                        slot_kind.push(Slot::Exemplar(n_ex));
                        ex_rows.extend_from_slice(r);
                        n_ex += 1;
                    }
                }
            }
            for &t in item.cont {
                if t >= self.vocab_size {
                    return Err(crate::data::DataError::UnknownTokenId(t).into());
                }
                ids.push(t);
                slot_kind.push(Slot::Token);
            }
            let len = ids.len() - start;
            if len > self.dims.max_len {
                return Err(ModelError::SequenceTooLong { len, max: self.dims.max_len });
            }
            pos.extend(0..len);
            segments.push(len);
            let n_out = item.cont.len() + 1;
            out_rows.extend(start + len - n_out..start + len);
            rows.push(n_out);
        }
        if ids.is_empty() {
            return Err(ModelError::DimMismatch("empty batch".into()));
        }

        let tok_emb = self.var(g, "tok_emb");
        let pos_emb = self.var(g, "pos_emb");
        let tok = g.select_rows(tok_emb, &ids)?;
        let posv = g.select_rows(pos_emb, &pos)?;
        let mut h = g.add(tok, posv)?;

        let mut sources = vec![g.constant(Tensor::zeros(&[1, d]))];
        if n_img > 0 {
            let x = g.constant(Tensor::matrix(n_img, self.dims.d_v, img_rows)?);
            let (w, b) = (self.var(g, "vl.w"), self.var(g, "vl.b"));
            sources.push(g.affine(x, w, b)?);
        }
        if n_ex > 0 {
            let x = g.constant(Tensor::matrix(n_ex, self.dims.d_t, ex_rows)?);
            sources.push(self.task_connector(g, x)?);
        }
        if sources.len() > 1 {
            let ex_base = 1 + n_img;
            let index: Vec<usize> = slot_kind
                .iter()
                .map(|s| match *s {
                    Slot::Token => 0,
                    Slot::Image(i) => 1 + i,
                    Slot::Exemplar(j) => ex_base + j,
                })
                .collect();
            let src = g.concat_rows(&sources)?;
            let slots = g.select_rows(src, &index)?;
            h = g.add(h, slots)?;
        }

        for l in 0..self.dims.layers {
            let q = self.projection(g, h, l, "q", adapters_on)?;
            let k = self.projection(g, h, l, "k", adapters_on)?;
            let v = self.projection(g, h, l, "v", adapters_on)?;
            let att = g.causal_attention(q, k, v, self.dims.heads, &segments)?;
            let (wo, bo) = (self.var(g, &format!("l{l}.wo")), self.var(g, &format!("l{l}.bo")));
            let o = g.affine(att, wo, bo)?;
            h = g.add(h, o)?;
            let (w1, b1) = (self.var(g, &format!("l{l}.w1")), self.var(g, &format!("l{l}.b1")));
            let f = g.affine(h, w1, b1)?;
            let f = g.gelu(f);
            let (w2, b2) = (self.var(g, &format!("l{l}.w2")), self.var(g, &format!("l{l}.b2")));
            let f = g.affine(f, w2, b2)?;
            h = g.add(h, f)?;
        }
        let sel = g.select_rows(h, &out_rows)?;
        let (hw, hb) = (self.var(g, "head.w"), self.var(g, "head.b"));
        let logits = g.affine(sel, hw, hb)?;
        Ok(ForwardOut { logits, rows })
    }
}

#[derive(Clone, Copy)]
enum Slot {
    Token,
    Image(usize),
    Exemplar(usize),
}

/// Marks which parameter groups receive gradients.
pub fn set_trainable(model: &mut VlmModel, phase: TrainPhase) {
    model.trainable = phase.groups().iter().copied().collect();
}

/// One sequence of a packed forward.
#[derive(Clone, Copy, Debug)]
pub struct SeqInput<'a> {
    /// Prompt tokens with exactly one `<image>` placeholder.
    pub prompt: &'a [TokenId],
    /// Teacher-forced tokens after the prompt.
    pub cont: &'a [TokenId],
    /// `P x d_v` patch embeddings from the frozen encoder.
    pub patches: &'a Tensor,
    pub exemplar: Option<&'a ExemplarFeatures>,
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `[sum(rows), V]` logits, items in order.
    pub logits: Var,
    /// Logit rows per item.
    pub rows: Vec<usize>,
}

/// A record with its frozen-encoder output and (optionally) exemplar cached.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedRecord {
    pub sample_id: String,
    pub dataset_id: String,
    pub label: usize,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
    pub patches: Tensor,
    pub exemplar: Option<ExemplarFeatures>,
}

impl PreparedRecord {
    pub fn new(record: &InstructionRecord, model: &VlmModel, tsm: Option<&TsmModel>) -> Result<Self, ModelError> {
        let (patches, _) = encode_image(&record.image_features, &model.encoder)?;
        let exemplar = tsm.map(|t| extract_exemplar(t, &record.image_features)).transpose()?;
        if record.image_token_count() != 1 {
            return Err(crate::data::DataError::BadTemplate.into());
        }
        Ok(Self {
            sample_id: record.sample_id.clone(),
            dataset_id: record.dataset_id.clone(),
            label: record.label,
            prompt: record.instruction_tokens.clone(),
            response: record.response_tokens.clone(),
            patches,
            exemplar,
        })
    }

    /// Teacher-forced input predicting this record's response.
    pub fn teacher_forced(&self) -> SeqInput<'_> {
        self.with_response(&self.response)
    }

    /// Teacher-forced input predicting `response` (e.g. another record's
    /// response on this record's image).
    pub fn with_response<'a>(&'a self, response: &'a [TokenId]) -> SeqInput<'a> {
        SeqInput {
            prompt: &self.prompt,
            cont: &response[..response.len().saturating_sub(1)],
            patches: &self.patches,
            exemplar: self.exemplar.as_ref(),
        }
    }
}

/// Pre-softmax scores at every response position.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseLogits {
    /// `[T_response, V]`.
    pub logits: Tensor,
    pub ep_used: bool,
    pub ep_variant: EpVariant,
}

/// Single-record forward returning plain tensors.
pub fn vlm_forward(
    record: &InstructionRecord,
    model: &VlmModel,
    tsm: Option<&TsmModel>,
    ep_variant: EpVariant,
    adapters_on: bool,
) -> Result<ResponseLogits, ModelError> {
    if !ep_variant.is_none() && tsm.is_none() {
        return Err(ModelError::MissingTsm(ep_variant));
    }
    let prepared = PreparedRecord::new(record, model, tsm)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, &[prepared.teacher_forced()], ep_variant, adapters_on)?;
    Ok(ResponseLogits { logits: g.value(out.logits).clone(), ep_used: !ep_variant.is_none(), ep_variant })
}
