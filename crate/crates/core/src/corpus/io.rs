//! JSON-lines corpus loading and saving.
//!
//! One object per line:
//! `{"id": "...", "text": "..."}` or `"turns": [...]`, plus
//! `"label": int | [int, ...] | [{"pair": j, "value": i}, ...] | null`
//! and `"split": "train" | "validation" | "test"`. `label: null` marks an
//! unlabeled example. Response-selection records may carry an optional
//! `"candidates": [int, ...]` evaluation pool.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, LabelValue, Ontology, TaskKind, Text, Vocab};
use crate::error::{Error, Result};

/// Corpus loading knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    /// Token cap per example; longer inputs are truncated from the left so
    /// the most recent turns survive.
    pub max_tokens: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_tokens: 128 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    turns: Option<Vec<String>>,
    #[serde(default)]
    label: Option<RawLabel>,
    split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<Vec<usize>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Index(usize),
    Set(Vec<usize>),
    Slots(Vec<RawSlot>),
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSlot {
    pair: usize,
    value: usize,
}

fn parse_label(raw: &RawLabel, task: TaskKind, ontology: &Ontology) -> Result<LabelValue> {
    let label = match (task, raw) {
        (TaskKind::Intent, RawLabel::Index(c)) => LabelValue::SingleClass(*c),
        (TaskKind::ResponseSelection, RawLabel::Index(r)) => LabelValue::ResponseRef(*r),
        (TaskKind::DialogAct, RawLabel::Set(ids)) => {
            let mut bits = vec![false; ontology.da_intents.len()];
            for &i in ids {
                if i >= bits.len() {
                    return Err(Error::Schema(format!(
                        "dialog-act intent {i} outside ontology of {}",
                        bits.len()
                    )));
                }
                bits[i] = true;
            }
            LabelValue::MultiLabel(bits)
        }
        (TaskKind::DialogAct, RawLabel::Index(i)) => {
            // A bare int is accepted as a one-element set.
            let mut bits = vec![false; ontology.da_intents.len()];
            if *i >= bits.len() {
                return Err(Error::Schema(format!(
                    "dialog-act intent {i} outside ontology of {}",
                    bits.len()
                )));
            }
            bits[*i] = true;
            LabelValue::MultiLabel(bits)
        }
        (TaskKind::Dst, RawLabel::Slots(slots)) => {
            let mut values: Vec<usize> = ontology.slots.iter().map(|s| s.none_index()).collect();
            for s in slots {
                if s.pair >= values.len() {
                    return Err(Error::Schema(format!(
                        "slot pair {} outside ontology of {}",
                        s.pair,
                        values.len()
                    )));
                }
                values[s.pair] = s.value;
            }
            LabelValue::SlotAssignment(values)
        }
        // An empty JSON array is parsed as Set([]) regardless of task.
        (TaskKind::Dst, RawLabel::Set(ids)) if ids.is_empty() => {
            LabelValue::SlotAssignment(ontology.slots.iter().map(|s| s.none_index()).collect())
        }
        (task, _) => {
            return Err(Error::Schema(format!(
                "label shape does not fit task {}",
                task.name()
            )));
        }
    };
    ontology.check_label(task, &label)?;
    Ok(label)
}

fn render_label(label: &LabelValue) -> RawLabel {
    match label {
        LabelValue::SingleClass(c) => RawLabel::Index(*c),
        LabelValue::ResponseRef(r) => RawLabel::Index(*r),
        LabelValue::MultiLabel(bits) => RawLabel::Set(
            bits.iter()
                .enumerate()
                .filter_map(|(i, &b)| b.then_some(i))
                .collect(),
        ),
        LabelValue::SlotAssignment(values) => RawLabel::Slots(
            values
                .iter()
                .enumerate()
                .map(|(pair, &value)| RawSlot { pair, value })
                .collect(),
        ),
    }
}

/// Reads an ontology file (a single JSON object).
pub fn load_ontology(path: &Path) -> Result<Ontology> {
    let text = std::fs::read_to_string(path)?;
    let ontology: Ontology = serde_json::from_str(&text)?;
    Ok(ontology)
}

pub fn save_ontology(path: &Path, ontology: &Ontology) -> Result<()> {
    let text = serde_json::to_string_pretty(ontology)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Loads a JSON-lines corpus against an ontology, producing a validated
/// [`Dataset`]: the vocabulary is built from the train split, unknown
/// tokens map to `[unk]`, and ordering follows the file.
pub fn load_jsonl(
    path: &Path,
    ontology: &Ontology,
    task: TaskKind,
    options: &LoadOptions,
) -> Result<Dataset> {
    ontology.validate(task)?;
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);

    let mut records: Vec<(usize, RawRecord)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        records.push((idx + 1, record));
    }
    assemble(records, ontology.clone(), task, options)
}

fn assemble(
    records: Vec<(usize, RawRecord)>,
    ontology: Ontology,
    task: TaskKind,
    options: &LoadOptions,
) -> Result<Dataset> {
    // Vocabulary comes from train-split text plus ontology phrases (slot
    // values and candidate responses are part of the task definition, and
    // the encoder must be able to represent them); validation/test text
    // still exercises the [unk] path.
    let mut train_tokens: Vec<Vec<String>> = Vec::new();
    for (line, record) in &records {
        if record.split == "train" {
            match (&record.text, &record.turns) {
                (Some(t), None) => train_tokens.push(super::tokenize(t)),
                (None, Some(turns)) => {
                    for t in turns {
                        train_tokens.push(super::tokenize(t));
                    }
                }
                _ => {
                    return Err(Error::Parse {
                        line: *line,
                        message: "record needs exactly one of \"text\" or \"turns\"".into(),
                    });
                }
            }
        }
    }
    for slot in &ontology.slots {
        for value in &slot.values {
            train_tokens.push(super::tokenize(value));
        }
    }
    for response in &ontology.responses {
        train_tokens.push(super::tokenize(response));
    }
    let vocab = Vocab::build(train_tokens.iter().map(|t| t.as_slice()));

    let mut seen: HashSet<String> = HashSet::new();
    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();

    for (line, record) in records {
        if !seen.insert(record.id.clone()) {
            return Err(Error::Schema(format!(
                "duplicate example id \"{}\" (line {line})",
                record.id
            )));
        }
        let text = match (record.text, record.turns) {
            (Some(t), None) => Text::Utterance(t),
            (None, Some(turns)) => Text::Turns(turns),
            _ => {
                return Err(Error::Parse {
                    line,
                    message: "record needs exactly one of \"text\" or \"turns\"".into(),
                });
            }
        };
        let tokens = Dataset::encode_text(&vocab, &text, options.max_tokens);
        if tokens.is_empty() {
            return Err(Error::Schema(format!(
                "example \"{}\" has no tokens (line {line})",
                record.id
            )));
        }
        let label = match &record.label {
            Some(raw) => Some(parse_label(raw, task, &ontology)?),
            None => None,
        };
        if let Some(pool) = &record.candidates {
            for &c in pool {
                if c >= ontology.responses.len() {
                    return Err(Error::Schema(format!(
                        "candidate index {c} outside response pool (line {line})"
                    )));
                }
            }
        }
        let example = Example {
            id: record.id,
            text,
            tokens,
            label,
            candidate_pool: record.candidates,
        };
        match record.split.as_str() {
            "train" => train.push(example),
            "validation" => validation.push(example),
            "test" => test.push(example),
            other => {
                return Err(Error::Parse {
                    line,
                    message: format!("unknown split \"{other}\""),
                });
            }
        }
    }

    Ok(Dataset {
        task,
        ontology,
        vocab,
        train,
        validation,
        test,
    })
}

/// Writes a dataset back to the JSON-lines schema, inverse of
/// [`load_jsonl`].
pub fn save_jsonl(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    for (split, examples) in [
        ("train", &dataset.train),
        ("validation", &dataset.validation),
        ("test", &dataset.test),
    ] {
        for example in examples {
            let (text, turns) = match &example.text {
                Text::Utterance(t) => (Some(t.clone()), None),
                Text::Turns(t) => (None, Some(t.clone())),
            };
            let record = RawRecord {
                id: example.id.clone(),
                text,
                turns,
                label: example.label.as_ref().map(render_label),
                split: split.to_string(),
                candidates: example.candidate_pool.clone(),
            };
            writeln!(file, "{}", serde_json::to_string(&record)?)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SlotDef;

    fn intent_ontology() -> Ontology {
        Ontology {
            task: Some(TaskKind::Intent),
            classes: vec!["alpha".into(), "beta".into()],
            ..Default::default()
        }
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write as _;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(f, "{line}").unwrap();
        }
        f
    }

    #[test]
    fn loads_labeled_and_unlabeled() {
        let f = write_lines(&[
            r#"{"id": "a", "text": "hello alpha", "label": 0, "split": "train"}"#,
            r#"{"id": "b", "text": "hello beta", "label": null, "split": "train"}"#,
        ]);
        let ds = load_jsonl(
            f.path(),
            &intent_ontology(),
            TaskKind::Intent,
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.train.iter().filter(|e| e.label.is_some()).count(), 1);
        assert_eq!(ds.train.iter().filter(|e| e.label.is_none()).count(), 1);
    }

    #[test]
    fn label_outside_ontology_is_schema_error() {
        let f = write_lines(&[r#"{"id": "a", "text": "x", "label": 2, "split": "train"}"#]);
        let err = load_jsonl(
            f.path(),
            &intent_ontology(),
            TaskKind::Intent,
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn duplicate_id_across_splits_is_schema_error() {
        let f = write_lines(&[
            r#"{"id": "a", "text": "x", "label": 0, "split": "train"}"#,
            r#"{"id": "a", "text": "y", "label": 1, "split": "test"}"#,
        ]);
        let err = load_jsonl(
            f.path(),
            &intent_ontology(),
            TaskKind::Intent,
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let f = write_lines(&[
            r#"{"id": "a", "text": "x", "label": 0, "split": "train"}"#,
            r#"{"id": "b", nonsense"#,
        ]);
        let err = load_jsonl(
            f.path(),
            &intent_ontology(),
            TaskKind::Intent,
            &LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn round_trips_to_identical_dataset() {
        let f = write_lines(&[
            r#"{"id": "a", "text": "Hello there, Friend!", "label": 0, "split": "train"}"#,
            r#"{"id": "b", "turns": ["hi", "HELLO back"], "label": 1, "split": "train"}"#,
            r#"{"id": "c", "text": "unseen words appear", "label": null, "split": "train"}"#,
            r#"{"id": "d", "text": "hello validation", "label": 1, "split": "validation"}"#,
            r#"{"id": "e", "text": "hello test", "label": 0, "split": "test"}"#,
        ]);
        let onto = intent_ontology();
        let opts = LoadOptions::default();
        let first = load_jsonl(f.path(), &onto, TaskKind::Intent, &opts).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        save_jsonl(out.path(), &first).unwrap();
        let second = load_jsonl(out.path(), &onto, TaskKind::Intent, &opts).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn dst_labels_fill_missing_pairs_with_none() {
        let onto = Ontology {
            task: Some(TaskKind::Dst),
            slots: vec![
                SlotDef {
                    domain: "food".into(),
                    slot: "type".into(),
                    values: vec!["none".into(), "thai".into()],
                },
                SlotDef {
                    domain: "food".into(),
                    slot: "area".into(),
                    values: vec!["none".into(), "north".into()],
                },
            ],
            ..Default::default()
        };
        let f = write_lines(&[
            r#"{"id": "a", "turns": ["thai please"], "label": [{"pair": 1, "value": 1}], "split": "train"}"#,
        ]);
        let ds = load_jsonl(f.path(), &onto, TaskKind::Dst, &LoadOptions::default()).unwrap();
        assert_eq!(
            ds.train[0].label,
            Some(LabelValue::SlotAssignment(vec![0, 1]))
        );
    }
}
