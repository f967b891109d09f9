//! Synthetic corpora for tests and desk-scale experiments.
//!
//! Utterances are templated: each label leaves a distinctive keyword in
//! the text, padded with filler words shared across labels, so a correct
//! model can reach near-perfect accuracy while an untrained one cannot.

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, LabelValue, Ontology, SlotDef, TaskKind, Text, Vocab};
use crate::error::{Error, Result};
use crate::numeric::StreamRng;

/// Specification of a synthetic intent-classification corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthIntentSpec {
    pub classes: usize,
    pub vocab_size: usize,
    pub templates_per_class: usize,
    /// Probability of replacing the class keyword with another class's
    /// keyword. Capped at 0.05 so Bayes accuracy stays >= 0.95.
    pub noise_rate: f64,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for SynthIntentSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            vocab_size: 200,
            templates_per_class: 3,
            noise_rate: 0.02,
            train_size: 5000,
            val_size: 500,
            test_size: 500,
            seed: 2024,
        }
    }
}

struct TemplateBank {
    /// Per class, a list of (length, keyword position) patterns.
    patterns: Vec<Vec<(usize, usize)>>,
    keywords: Vec<String>,
    fillers: Vec<String>,
    /// Fillers below this index form a stopword-like pool shared by all
    /// classes; the rest is partitioned into per-class topic windows,
    /// giving the corpus the co-occurrence structure of real text.
    shared_fillers: usize,
    /// Per class, the (start, width) topic window within the filler pool.
    filler_windows: Vec<(usize, usize)>,
}

fn build_templates(spec: &SynthIntentSpec, rng: &mut StreamRng) -> Result<TemplateBank> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic corpus needs >= 2 classes".into()));
    }
    if spec.noise_rate < 0.0 || spec.noise_rate > 0.05 {
        return Err(Error::Config(format!(
            "noise rate {} outside [0, 0.05]",
            spec.noise_rate
        )));
    }
    if spec.templates_per_class == 0 {
        return Err(Error::Config("need at least one template per class".into()));
    }
    // Keywords take the front of the word list; at least 20 filler words
    // must remain so templates have something to vary.
    if spec.vocab_size < spec.classes + 20 {
        return Err(Error::Config(format!(
            "vocab size {} too small for {} classes plus fillers",
            spec.vocab_size, spec.classes
        )));
    }
    let keywords: Vec<String> = (0..spec.classes).map(|c| format!("kw{c}")).collect();
    let filler_count = spec.vocab_size - spec.classes;
    let fillers: Vec<String> = (0..filler_count).map(|i| format!("f{i}")).collect();
    let shared_fillers = (filler_count / 3).max(1).min(filler_count);
    let topic_pool = filler_count - shared_fillers;
    let window_width = if topic_pool == 0 {
        shared_fillers
    } else {
        (topic_pool / spec.classes).max(1)
    };
    let filler_windows: Vec<(usize, usize)> = (0..spec.classes)
        .map(|c| {
            if topic_pool == 0 {
                (0, window_width)
            } else {
                (
                    shared_fillers + (c * topic_pool) / spec.classes,
                    window_width.min(topic_pool),
                )
            }
        })
        .collect();
    let mut patterns = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let mut class_patterns = Vec::with_capacity(spec.templates_per_class);
        for _ in 0..spec.templates_per_class {
            let len = 4 + rng.below(3); // 4..=6 words
            let pos = rng.below(len);
            class_patterns.push((len, pos));
        }
        patterns.push(class_patterns);
    }
    Ok(TemplateBank {
        patterns,
        keywords,
        fillers,
        shared_fillers,
        filler_windows,
    })
}

fn render_intent_example(
    bank: &TemplateBank,
    class: usize,
    noise_rate: f64,
    rng: &mut StreamRng,
) -> String {
    let (len, pos) = bank.patterns[class][rng.below(bank.patterns[class].len())];
    let keyword = if noise_rate > 0.0 && rng.uniform() < noise_rate {
        // Label-corrupting noise: another class's keyword.
        let mut other = rng.below(bank.keywords.len() - 1);
        if other >= class {
            other += 1;
        }
        &bank.keywords[other]
    } else {
        &bank.keywords[class]
    };
    let (start, width) = bank.filler_windows[class];
    let words: Vec<&str> = (0..len)
        .map(|i| {
            if i == pos {
                keyword.as_str()
            } else if rng.uniform() < 0.5 {
                // Stopword-like filler shared across all classes.
                bank.fillers[rng.below(bank.shared_fillers)].as_str()
            } else {
                // Topic filler from this class's window.
                let offset = (start + rng.below(width)) % bank.fillers.len();
                bank.fillers[offset].as_str()
            }
        })
        .collect();
    words.join(" ")
}

/// Generates a balanced synthetic intent corpus. Classes are assigned
/// round-robin so label marginals are near-identical across seeds, and the
/// class keyword appears in every utterance except under label noise.
pub fn synth_generate(spec: &SynthIntentSpec) -> Result<Dataset> {
    let mut rng = StreamRng::new(spec.seed).derive_str("synth-intent");
    let bank = build_templates(spec, &mut rng)?;

    let ontology = Ontology {
        task: Some(TaskKind::Intent),
        classes: (0..spec.classes).map(|c| format!("intent_{c}")).collect(),
        ..Default::default()
    };

    let make_split =
        |name: &str, size: usize, rng: &mut StreamRng| -> Vec<(String, String, usize)> {
            let mut rows = Vec::with_capacity(size);
            for i in 0..size {
                let class = i % spec.classes;
                let text = render_intent_example(&bank, class, spec.noise_rate, rng);
                rows.push((format!("{name}-{i:05}"), text, class));
            }
            rng.shuffle(&mut rows);
            rows
        };

    let train = make_split("train", spec.train_size, &mut rng);
    let validation = make_split("validation", spec.val_size, &mut rng);
    let test = make_split("test", spec.test_size, &mut rng);

    from_rows(
        TaskKind::Intent,
        ontology,
        [train, validation, test],
        LabelValue::SingleClass,
    )
}

/// Specification of a synthetic multi-label dialog-act corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDialogActSpec {
    pub intents: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Each positive dialog-act intent leaves its keyword in the utterance.
pub fn synth_dialog_act(spec: &SynthDialogActSpec) -> Result<Dataset> {
    if spec.intents == 0 {
        return Err(Error::Config("need at least one dialog-act intent".into()));
    }
    let mut rng = StreamRng::new(spec.seed).derive_str("synth-da");
    let fillers: Vec<String> = (0..30).map(|i| format!("f{i}")).collect();
    let ontology = Ontology {
        task: Some(TaskKind::DialogAct),
        da_intents: (0..spec.intents).map(|i| format!("act_{i}")).collect(),
        ..Default::default()
    };
    let make_split = |name: &str, size: usize, rng: &mut StreamRng| {
        let mut rows = Vec::with_capacity(size);
        for i in 0..size {
            let mut bits = vec![false; spec.intents];
            bits[i % spec.intents] = true;
            for (j, bit) in bits.iter_mut().enumerate() {
                if j != i % spec.intents && rng.uniform() < 0.25 {
                    *bit = true;
                }
            }
            let mut words: Vec<String> = bits
                .iter()
                .enumerate()
                .filter(|&(_, &b)| b)
                .map(|(j, _)| format!("act{j}"))
                .collect();
            for _ in 0..3 {
                words.push(fillers[rng.below(fillers.len())].clone());
            }
            rng.shuffle(&mut words);
            rows.push((format!("{name}-{i:05}"), words.join(" "), bits));
        }
        rows
    };
    let train = make_split("train", spec.train_size, &mut rng);
    let validation = make_split("validation", spec.val_size, &mut rng);
    let test = make_split("test", spec.test_size, &mut rng);
    from_rows(
        TaskKind::DialogAct,
        ontology,
        [train, validation, test],
        LabelValue::MultiLabel,
    )
}

/// Specification of a synthetic dialog-state-tracking corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthDstSpec {
    pub pairs: usize,
    /// Values per (domain, slot) pair, not counting "none".
    pub values_per_pair: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Each non-"none" slot value leaves a pair-specific keyword in the turn.
pub fn synth_dst(spec: &SynthDstSpec) -> Result<Dataset> {
    if spec.pairs == 0 || spec.values_per_pair == 0 {
        return Err(Error::Config("dst spec needs pairs and values".into()));
    }
    let mut rng = StreamRng::new(spec.seed).derive_str("synth-dst");
    let fillers: Vec<String> = (0..20).map(|i| format!("f{i}")).collect();
    let slots: Vec<SlotDef> = (0..spec.pairs)
        .map(|j| SlotDef {
            domain: "dom".into(),
            slot: format!("slot{j}"),
            values: std::iter::once("none".to_string())
                .chain((0..spec.values_per_pair).map(|v| format!("p{j}v{v}")))
                .collect(),
        })
        .collect();
    let ontology = Ontology {
        task: Some(TaskKind::Dst),
        slots,
        ..Default::default()
    };
    let slots = ontology.slots.clone();
    let make_split = |name: &str, size: usize, rng: &mut StreamRng| {
        let mut rows = Vec::with_capacity(size);
        for i in 0..size {
            let mut assignment = Vec::with_capacity(spec.pairs);
            let mut words: Vec<String> = Vec::new();
            for slot in &slots {
                // "none" with probability 1/3, otherwise a concrete value.
                let v = if rng.uniform() < 1.0 / 3.0 {
                    slot.none_index()
                } else {
                    1 + rng.below(spec.values_per_pair)
                };
                assignment.push(v);
                if v != slot.none_index() {
                    words.push(slot.values[v].clone());
                }
            }
            for _ in 0..2 {
                words.push(fillers[rng.below(fillers.len())].clone());
            }
            rng.shuffle(&mut words);
            rows.push((format!("{name}-{i:05}"), words.join(" "), assignment));
        }
        rows
    };
    let train = make_split("train", spec.train_size, &mut rng);
    let validation = make_split("validation", spec.val_size, &mut rng);
    let test = make_split("test", spec.test_size, &mut rng);
    from_rows(
        TaskKind::Dst,
        ontology,
        [train, validation, test],
        LabelValue::SlotAssignment,
    )
}

/// Specification of a synthetic response-selection corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthResponseSpec {
    /// Distinct query/response topics; response i answers topic i.
    pub topics: usize,
    /// Total candidate pool size; must exceed the 100 evaluation
    /// negatives, so at least `topics + 101`.
    pub pool_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Queries and their gold responses share a topic keyword; the rest of the
/// pool is filled with distractor responses.
pub fn synth_response_selection(spec: &SynthResponseSpec) -> Result<Dataset> {
    if spec.pool_size < spec.topics + 101 {
        return Err(Error::Config(format!(
            "pool size {} must be at least topics + 101 = {}",
            spec.pool_size,
            spec.topics + 101
        )));
    }
    let mut rng = StreamRng::new(spec.seed).derive_str("synth-rs");
    let fillers: Vec<String> = (0..25).map(|i| format!("f{i}")).collect();
    let mut responses: Vec<String> = (0..spec.topics)
        .map(|t| format!("reply topic{t} confirmed"))
        .collect();
    for d in 0..spec.pool_size - spec.topics {
        responses.push(format!("distractor d{d} text"));
    }
    let ontology = Ontology {
        task: Some(TaskKind::ResponseSelection),
        responses,
        ..Default::default()
    };
    let make_split = |name: &str, size: usize, rng: &mut StreamRng| {
        let mut rows = Vec::with_capacity(size);
        for i in 0..size {
            let topic = i % spec.topics;
            let mut words = vec![format!("topic{topic}"), "please".to_string()];
            for _ in 0..2 {
                words.push(fillers[rng.below(fillers.len())].clone());
            }
            rng.shuffle(&mut words);
            rows.push((format!("{name}-{i:05}"), words.join(" "), topic));
        }
        rows
    };
    let train = make_split("train", spec.train_size, &mut rng);
    let validation = make_split("validation", spec.val_size, &mut rng);
    let test = make_split("test", spec.test_size, &mut rng);
    from_rows(
        TaskKind::ResponseSelection,
        ontology,
        [train, validation, test],
        LabelValue::ResponseRef,
    )
}

/// Assembles generated rows into a [`Dataset`] through the same pipeline
/// as file loading: vocabulary from the train split, `[unk]` elsewhere.
fn from_rows<L>(
    task: TaskKind,
    ontology: Ontology,
    [train, validation, test]: [Vec<(String, String, L)>; 3],
    to_label: impl Fn(L) -> LabelValue,
) -> Result<Dataset> {
    let mut train_tokens: Vec<Vec<String>> =
        train.iter().map(|(_, t, _)| super::tokenize(t)).collect();
    for slot in &ontology.slots {
        for value in &slot.values {
            train_tokens.push(super::tokenize(value));
        }
    }
    for response in &ontology.responses {
        train_tokens.push(super::tokenize(response));
    }
    let vocab = Vocab::build(train_tokens.iter().map(|t| t.as_slice()));
    let build = |rows: Vec<(String, String, L)>| -> Result<Vec<Example>> {
        rows.into_iter()
            .map(|(id, text, raw)| {
                let label = to_label(raw);
                ontology.check_label(task, &label)?;
                let text = Text::Utterance(text);
                let tokens = Dataset::encode_text(&vocab, &text, 128);
                Ok(Example {
                    id,
                    text,
                    tokens,
                    label: Some(label),
                    candidate_pool: None,
                })
            })
            .collect()
    };
    let (train, validation, test) = (build(train)?, build(validation)?, build(test)?);
    Ok(Dataset {
        task,
        ontology,
        vocab,
        train,
        validation,
        test,
    })
}
