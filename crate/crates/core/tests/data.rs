#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vitask::data::{
    format_instruction, generate_synthetic_task, read_corpus, sample_negative, split_dataset, write_corpus, Catalog,
    ClassificationSample, InstructionRecord, InstructionTemplate, NegativeIndex, SplitRatios, SynthConfig, Vocabulary,
};

fn records(samples: &[ClassificationSample]) -> (Vocabulary, Vec<InstructionRecord>) {
    let catalog = Catalog::builtin();
    let template = InstructionTemplate::default();
    let vocab = Vocabulary::build(&catalog, &template);
    let recs = samples
        .iter()
        .map(|s| format_instruction(s, &template, catalog.get(&s.dataset_id).unwrap(), &vocab).unwrap())
        .collect();
    (vocab, recs)
}

#[test]
fn negative_is_uniform_over_other_classes() {
    // 4 classes, 10 each: an anchor of class 0 has 30 eligible negatives,
    // 10 per other class.
    let samples = generate_synthetic_task(&SynthConfig::new("oct", 4, 8, 10, 6.0, 0)).unwrap();
    let (_, recs) = records(&samples);
    let anchor = &recs[0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        let n = sample_negative(anchor, &recs, &mut rng).unwrap();
        assert_ne!(n.label, anchor.label);
        *counts.entry(n.label).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    for (&label, &c) in &counts {
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "class {label}: {f}");
    }
}

#[test]
fn negative_index_never_returns_same_response() {
    let samples = generate_synthetic_task(&SynthConfig::new("derma", 7, 8, 6, 6.0, 1)).unwrap();
    let (_, recs) = records(&samples);
    let index = NegativeIndex::new(&recs).unwrap();
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(index.eligible(i).len(), 36);
        for &j in index.eligible(i) {
            assert_eq!(recs[j].instruction_tokens, r.instruction_tokens);
            assert_ne!(recs[j].response_tokens, r.response_tokens);
        }
    }
}

#[test]
fn single_class_pool_has_no_negative() {
    let samples = generate_synthetic_task(&SynthConfig::new("pneumonia", 2, 4, 3, 6.0, 1)).unwrap();
    let (_, recs) = records(&samples);
    let only_zero: Vec<_> = recs.iter().filter(|r| r.label == 0).cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_negative(&only_zero[0], &only_zero, &mut rng).unwrap_err();
    assert!(err.to_string().starts_with("no valid negative for sample"));
    assert!(NegativeIndex::new(&only_zero).is_err());
}

#[test]
fn tokenizer_round_trips_every_corpus_string() {
    let catalog = Catalog::builtin();
    let template = InstructionTemplate::default();
    let vocab = Vocabulary::build(&catalog, &template);
    for ds in catalog.datasets() {
        let samples = generate_synthetic_task(&SynthConfig::new(&ds.id, ds.num_classes(), 8, 3, 6.0, 2)).unwrap();
        for s in &samples {
            let r = format_instruction(s, &template, ds, &vocab).unwrap();
            let prompt = template.prompt_text(&r.instruction);
            assert_eq!(vocab.decode(&vocab.encode(&prompt).unwrap()).unwrap(), prompt);
            assert_eq!(vocab.decode(&vocab.encode(&r.response).unwrap()).unwrap(), r.response);
        }
    }
}

#[test]
fn corpus_jsonl_round_trip() {
    let samples = generate_synthetic_task(&SynthConfig::new("blood", 8, 8, 3, 6.0, 2)).unwrap();
    let (_, recs) = records(&samples);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.jsonl");
    write_corpus(&p, &recs).unwrap();
    let rows = read_corpus(&p).unwrap();
    assert_eq!(rows.len(), recs.len());
    for (row, r) in rows.iter().zip(&recs) {
        assert_eq!(
            (row.sample_id.as_str(), row.label, row.response.as_str()),
            (r.sample_id.as_str(), r.label, r.response.as_str())
        );
    }
    let first = std::fs::read_to_string(&p).unwrap();
    let line = first.lines().next().unwrap();
    let pos: Vec<usize> = ["sample_id", "dataset_id", "label", "instruction", "response"]
        .iter()
        .map(|k| line.find(&format!("\"{k}\":")).unwrap())
        .collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]), "{line}");
}

/// Multinomial logistic regression by full-batch gradient descent.
fn logistic_probe(train: &[ClassificationSample], k: usize) -> impl Fn(&[f64]) -> usize {
    let d = train[0].features.len();
    let mut w = vec![vec![0.0; d + 1]; k];
    for _ in 0..300 {
        let mut g = vec![vec![0.0; d + 1]; k];
        for s in train {
            let z: Vec<f64> =
                w.iter().map(|wk| wk[d] + wk.iter().zip(&s.features).map(|(a, b)| a * b).sum::<f64>()).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..k {
                let delta = e[c] / tot - if c == s.label { 1.0 } else { 0.0 };
                for j in 0..d {
                    g[c][j] += delta * s.features[j];
                }
                g[c][d] += delta;
            }
        }
        for c in 0..k {
            for j in 0..=d {
                w[c][j] -= 0.05 * g[c][j] / train.len() as f64;
            }
        }
    }
    move |x: &[f64]| {
        (0..k)
            .max_by(|&a, &b| {
                let za = w[a][d] + w[a].iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                let zb = w[b][d] + w[b].iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                za.total_cmp(&zb)
            })
            .unwrap()
    }
}

#[test]
fn separated_clusters_are_linearly_probeable() {
    let samples = generate_synthetic_task(&SynthConfig::new("oct", 4, 16, 100, 6.0, 5)).unwrap();
    let split = split_dataset(&samples, SplitRatios::default(), 5).unwrap();
    let probe = logistic_probe(&split.train, 4);
    let correct = split.test.iter().filter(|s| probe(&s.features) == s.label).count();
    let acc = correct as f64 / split.test.len() as f64;
    assert!(acc > 0.95, "probe accuracy {acc}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn split_partitions_and_stratifies(k in 2usize..6, per in 3usize..30, seed in 0u64..1000) {
        let samples = generate_synthetic_task(&SynthConfig::new("d", k, k, per, 1.0, seed)).unwrap();
        let s = split_dataset(&samples, SplitRatios::default(), seed).unwrap();
        let mut ids: Vec<&str> = s.train.iter().chain(&s.val).chain(&s.test).map(|x| x.sample_id.as_str()).collect();
        ids.sort();
        let mut want: Vec<&str> = samples.iter().map(|x| x.sample_id.as_str()).collect();
        want.sort();
        prop_assert_eq!(ids, want);
        for (part, r) in [(&s.train, 0.7), (&s.val, 0.1), (&s.test, 0.2)] {
            for c in 0..k {
                let n = part.iter().filter(|x| x.label == c).count() as f64;
                prop_assert!((n - per as f64 * r).abs() <= 1.0 + 1e-9, "class {} got {} of {}", c, n, per);
            }
        }
    }
}
