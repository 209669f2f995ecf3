use serde::{Deserialize, Serialize};

use super::{ClassificationSample, DataError, DatasetSpec, TokenId, Vocabulary};

/// Chat-style prompt plus the two instruction clauses.
///
/// `prompt` wraps the instruction (`{instruction}`) and carries the single
/// `<image>` placeholder. `task` names the modality (`{modality}`); `options`
/// lists the candidate class names (`{classes}`) and is the clause dropped by
/// [`make_incomplete`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionTemplate {
    pub prompt: String,
    pub task: String,
    pub options: String,
}

impl Default for InstructionTemplate {
    fn default() -> Self {
        Self {
            prompt: "<|user|><image>{instruction}<|assistant|>".into(),
            task: "Analyze the given {modality} image for diagnosis.".into(),
            options: "The possible diagnoses are: {classes}.".into(),
        }
    }
}

impl InstructionTemplate {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.prompt.matches("<image>").count() != 1 || !self.prompt.contains("{instruction}") {
            return Err(DataError::BadTemplate);
        }
        Ok(())
    }

    /// Instruction body; `classes = None` omits the options clause.
    pub fn instruction(&self, modality: &str, classes: Option<&[&str]>) -> String {
        let mut s = self.task.replace("{modality}", modality);
        if let Some(names) = classes {
            s.push(' ');
            s.push_str(&self.options.replace("{classes}", &names.join(", ")));
        }
        s
    }

    pub fn prompt_text(&self, instruction: &str) -> String {
        self.prompt.replace("{instruction}", instruction)
    }
}

/// A sample rendered into instruction-following form.
#[derive(Clone, Debug, PartialEq)]
pub struct InstructionRecord {
    pub sample_id: String,
    pub image_features: Vec<f64>,
    pub dataset_id: String,
    pub label: usize,
    /// Instruction body text (without chat markers).
    pub instruction: String,
    /// Full prompt: `<|user|>`, `<image>`, instruction words, `<|assistant|>`.
    pub instruction_tokens: Vec<TokenId>,
    pub response: String,
    /// Class-name words followed by `<eos>`.
    pub response_tokens: Vec<TokenId>,
}

impl InstructionRecord {
    pub fn image_token_count(&self) -> usize {
        self.instruction_tokens.iter().filter(|&&t| t == Vocabulary::IMAGE).count()
    }
}

/// Renders the instruction body for a dataset, with or without the options clause.
pub fn render_instruction(template: &InstructionTemplate, dataset: &DatasetSpec, with_options: bool) -> String {
    let names: Vec<&str> = dataset.class_names.iter().map(String::as_str).collect();
    template.instruction(&dataset.modality, with_options.then_some(names.as_slice()))
}

fn build_record(
    sample: &ClassificationSample,
    template: &InstructionTemplate,
    dataset: &DatasetSpec,
    vocab: &Vocabulary,
    with_options: bool,
) -> Result<InstructionRecord, DataError> {
    template.validate()?;
    if sample.dataset_id != dataset.id {
        return Err(DataError::UnknownDataset(sample.dataset_id.clone()));
    }
    if dataset.class_names.is_empty() {
        return Err(DataError::EmptyClassNames(dataset.id.clone()));
    }
    let response = dataset
        .class_names
        .get(sample.label)
        .ok_or_else(|| DataError::UnknownLabel { dataset: dataset.id.clone(), label: sample.label })?
        .clone();
    let instruction = render_instruction(template, dataset, with_options);
    let instruction_tokens = vocab.encode(&template.prompt_text(&instruction))?;
    let mut response_tokens = vocab.encode(&response)?;
    response_tokens.push(Vocabulary::EOS);
    Ok(InstructionRecord {
        sample_id: sample.sample_id.clone(),
        image_features: sample.features.clone(),
        dataset_id: sample.dataset_id.clone(),
        label: sample.label,
        instruction,
        instruction_tokens,
        response,
        response_tokens,
    })
}

/// Formats a sample with the full class-list instruction.
pub fn format_instruction(
    sample: &ClassificationSample,
    template: &InstructionTemplate,
    dataset: &DatasetSpec,
    vocab: &Vocabulary,
) -> Result<InstructionRecord, DataError> {
    build_record(sample, template, dataset, vocab, true)
}

/// Re-renders a record without the options clause; the response is untouched.
pub fn make_incomplete(
    record: &InstructionRecord,
    template: &InstructionTemplate,
    dataset: &DatasetSpec,
    vocab: &Vocabulary,
) -> Result<InstructionRecord, DataError> {
    let sample = ClassificationSample {
        sample_id: record.sample_id.clone(),
        features: record.image_features.clone(),
        dataset_id: record.dataset_id.clone(),
        label: record.label,
    };
    let mut out = build_record(&sample, template, dataset, vocab, false)?;
    out.response = record.response.clone();
    out.response_tokens = record.response_tokens.clone();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Catalog;

    fn setup() -> (Catalog, InstructionTemplate, Vocabulary) {
        let c = Catalog::builtin();
        let t = InstructionTemplate::default();
        let v = Vocabulary::build(&c, &t);
        (c, t, v)
    }

    fn sample(label: usize) -> ClassificationSample {
        ClassificationSample {
            sample_id: "s0".into(),
            features: vec![0.0; 8],
            dataset_id: "derma".into(),
            label,
        }
    }

    #[test]
    fn vascular_lesion_response() {
        let (c, t, v) = setup();
        let r = format_instruction(&sample(6), &t, c.get("derma").unwrap(), &v).unwrap();
        assert_eq!(r.response, "vascular lesions");
        assert_eq!(v.decode(&r.response_tokens).unwrap(), "vascular lesions<eos>");
        assert_eq!(r.response_tokens.len(), 3);
        assert_eq!(
            r.instruction,
            "Analyze the given dermatoscope image for diagnosis. The possible diagnoses are: \
             actinic keratoses, basal cell carcinoma, benign keratosis-like lesions, dermatofibroma, \
             melanoma, melanocytic nevi, vascular lesions."
        );
        assert_eq!(r.instruction_tokens[0], Vocabulary::USER);
        assert_eq!(r.instruction_tokens[1], Vocabulary::IMAGE);
        assert_eq!(*r.instruction_tokens.last().unwrap(), Vocabulary::ASSISTANT);
        assert_eq!(r.image_token_count(), 1);
        assert!(!r.instruction_tokens.contains(&Vocabulary::EXEMPLAR));
    }

    #[test]
    fn unknown_label_and_empty_names_are_errors() {
        let (c, t, v) = setup();
        let derma = c.get("derma").unwrap();
        assert!(matches!(
            format_instruction(&sample(7), &t, derma, &v),
            Err(DataError::UnknownLabel { label: 7, .. })
        ));
        let empty = DatasetSpec { class_names: vec![], ..derma.clone() };
        assert!(matches!(format_instruction(&sample(0), &t, &empty, &v), Err(DataError::EmptyClassNames(_))));
    }

    #[test]
    fn template_needs_one_image_placeholder() {
        let (c, mut t, v) = setup();
        t.prompt = "<|user|>{instruction}<|assistant|>".into();
        assert!(matches!(
            format_instruction(&sample(0), &t, c.get("derma").unwrap(), &v),
            Err(DataError::BadTemplate)
        ));
    }

    #[test]
    fn incomplete_drops_class_names_and_is_idempotent() {
        let (c, t, v) = setup();
        let derma = c.get("derma").unwrap();
        let full = format_instruction(&sample(2), &t, derma, &v).unwrap();
        let inc = make_incomplete(&full, &t, derma, &v).unwrap();
        assert_eq!(inc.instruction, "Analyze the given dermatoscope image for diagnosis.");
        assert_eq!(inc.response_tokens, full.response_tokens);
        assert!(inc.instruction_tokens.len() < full.instruction_tokens.len());
        for name in &derma.class_names {
            assert!(!inc.instruction.contains(name.as_str()));
        }
        assert_eq!(make_incomplete(&inc, &t, derma, &v).unwrap(), inc);
    }
}
