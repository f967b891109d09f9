//! Data model and I/O: tokenization, vocabularies, labeled/unlabeled
//! examples, few-shot splits, and synthetic corpora.

mod io;
mod split;
pub mod synth;

pub use io::{load_jsonl, load_ontology, save_jsonl, save_ontology, LoadOptions};
pub use split::{few_shot_split, FewShotSplit, SealedLabels};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved vocabulary entries. The tokenizer can never produce these
/// (brackets split into their own tokens), so the ids stay distinct.
pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const UNK: usize = 2;
pub const SEP: usize = 3;
const RESERVED: [&str; 4] = ["[pad]", "[mask]", "[unk]", "[sep]"];

/// Lowercases and splits text on whitespace; punctuation becomes its own
/// single-character token. Deterministic, and idempotent on its own output
/// joined by spaces.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase().filter(|c| c.is_alphanumeric()));
        } else {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            if !ch.is_whitespace() {
                tokens.push(ch.to_string());
            }
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Token-to-id map with fixed reserved entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an iterator of token lists (typically the
    /// train split). Tokens are sorted so ids are stable across runs.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a [String]>) -> Vocab {
        let mut unique: Vec<String> = texts
            .into_iter()
            .flatten()
            .filter(|t| !RESERVED.contains(&t.as_str()))
            .cloned()
            .collect();
        unique.sort_unstable();
        unique.dedup();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(unique);
        let mut vocab = Vocab {
            tokens,
            index: HashMap::new(),
        };
        vocab.rebuild_index();
        vocab
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a token, falling back to `[unk]`.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn reserved_count() -> usize {
        RESERVED.len()
    }
}

/// Label attached to one example; the variant must match the dataset's
/// task kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LabelValue {
    /// Single class id (intent classification).
    SingleClass(usize),
    /// Indicator over the dialog-act intents.
    MultiLabel(Vec<bool>),
    /// One value index per (domain, slot) pair; every pair has an explicit
    /// "none" value so the assignment is total.
    SlotAssignment(Vec<usize>),
    /// Index of the ground-truth response in the candidate pool.
    ResponseRef(usize),
}

impl LabelValue {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LabelValue::SingleClass(_) => "single_class",
            LabelValue::MultiLabel(_) => "multi_label",
            LabelValue::SlotAssignment(_) => "slot_assignment",
            LabelValue::ResponseRef(_) => "response_ref",
        }
    }
}

/// Raw text of one example, kept for lossless serialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Text {
    Utterance(String),
    /// Dialog history; turns are joined with `[sep]` when tokenized.
    Turns(Vec<String>),
}

/// One task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub text: Text,
    /// Token ids after vocabulary mapping and truncation. Never empty.
    pub tokens: Vec<usize>,
    /// `None` marks an unlabeled example.
    pub label: Option<LabelValue>,
    /// Optional fixed evaluation candidate pool (response selection only).
    pub candidate_pool: Option<Vec<usize>>,
}

/// The four supported task kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Intent,
    Dst,
    DialogAct,
    ResponseSelection,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Intent => "intent",
            TaskKind::Dst => "dst",
            TaskKind::DialogAct => "dialog_act",
            TaskKind::ResponseSelection => "response_selection",
        }
    }
}

/// One (domain, slot) pair with its value list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotDef {
    pub domain: String,
    pub slot: String,
    /// Always contains the literal value "none".
    pub values: Vec<String>,
}

impl SlotDef {
    /// Index of the explicit "none" value.
    pub fn none_index(&self) -> usize {
        self.values.iter().position(|v| v == "none").unwrap_or(0)
    }
}

/// Label space for one dataset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Ontology {
    pub task: Option<TaskKind>,
    #[serde(default)]
    pub classes: Vec<String>,
    #[serde(default)]
    pub da_intents: Vec<String>,
    #[serde(default)]
    pub slots: Vec<SlotDef>,
    #[serde(default)]
    pub responses: Vec<String>,
    /// Name of the out-of-scope intent class, when the corpus has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_scope: Option<String>,
}

impl Ontology {
    /// Validates the fields needed by `task` are present and well-formed.
    pub fn validate(&self, task: TaskKind) -> Result<()> {
        match task {
            TaskKind::Intent => {
                if self.classes.len() < 2 {
                    return Err(Error::Schema("intent ontology needs >= 2 classes".into()));
                }
            }
            TaskKind::DialogAct => {
                if self.da_intents.is_empty() {
                    return Err(Error::Schema("dialog-act ontology has no intents".into()));
                }
            }
            TaskKind::Dst => {
                if self.slots.is_empty() {
                    return Err(Error::Schema(
                        "dst ontology has no (domain, slot) pairs".into(),
                    ));
                }
                for s in &self.slots {
                    if !s.values.iter().any(|v| v == "none") {
                        return Err(Error::Schema(format!(
                            "slot ({}, {}) lacks the explicit \"none\" value",
                            s.domain, s.slot
                        )));
                    }
                }
            }
            TaskKind::ResponseSelection => {
                if self.responses.is_empty() {
                    return Err(Error::Schema("response ontology has no candidates".into()));
                }
            }
        }
        Ok(())
    }

    /// Index of the out-of-scope class, when declared.
    pub fn oos_class(&self) -> Option<usize> {
        let name = self.out_of_scope.as_deref()?;
        self.classes.iter().position(|c| c == name)
    }

    /// Checks a label value against the ontology bounds.
    pub fn check_label(&self, task: TaskKind, label: &LabelValue) -> Result<()> {
        match (task, label) {
            (TaskKind::Intent, LabelValue::SingleClass(c)) => {
                if *c >= self.classes.len() {
                    return Err(Error::Schema(format!(
                        "class id {c} outside ontology of {} classes",
                        self.classes.len()
                    )));
                }
            }
            (TaskKind::DialogAct, LabelValue::MultiLabel(bits)) => {
                if bits.len() != self.da_intents.len() {
                    return Err(Error::Schema(format!(
                        "multi-label width {} != {} dialog-act intents",
                        bits.len(),
                        self.da_intents.len()
                    )));
                }
            }
            (TaskKind::Dst, LabelValue::SlotAssignment(values)) => {
                if values.len() != self.slots.len() {
                    return Err(Error::Schema(format!(
                        "slot assignment covers {} pairs, ontology has {}",
                        values.len(),
                        self.slots.len()
                    )));
                }
                for (j, (&v, slot)) in values.iter().zip(&self.slots).enumerate() {
                    if v >= slot.values.len() {
                        return Err(Error::Schema(format!(
                            "value id {v} outside pair {j} with {} values",
                            slot.values.len()
                        )));
                    }
                }
            }
            (TaskKind::ResponseSelection, LabelValue::ResponseRef(r)) => {
                if *r >= self.responses.len() {
                    return Err(Error::Schema(format!(
                        "response index {r} outside pool of {}",
                        self.responses.len()
                    )));
                }
            }
            (task, label) => {
                return Err(Error::Schema(format!(
                    "label kind {} does not match task {}",
                    label.kind_name(),
                    task.name()
                )));
            }
        }
        Ok(())
    }
}

/// A full corpus: ontology, vocabulary, and the three splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskKind,
    pub ontology: Ontology,
    pub vocab: Vocab,
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Tokenizes one raw text with the dataset pipeline: turns joined by
    /// `[sep]`, unknown tokens mapped to `[unk]`, truncated from the left
    /// to `max_tokens` (most recent turns are kept).
    pub fn encode_text(vocab: &Vocab, text: &Text, max_tokens: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        match text {
            Text::Utterance(s) => {
                ids.extend(tokenize(s).iter().map(|t| vocab.id_or_unk(t)));
            }
            Text::Turns(turns) => {
                for (i, turn) in turns.iter().enumerate() {
                    if i > 0 {
                        ids.push(SEP);
                    }
                    ids.extend(tokenize(turn).iter().map(|t| vocab.id_or_unk(t)));
                }
            }
        }
        if ids.len() > max_tokens {
            ids.drain(..ids.len() - max_tokens);
        }
        ids
    }

    /// All train-split token sequences (labeled and unlabeled alike), the
    /// masked-token model's training text.
    pub fn train_token_sequences(&self) -> Vec<Vec<usize>> {
        self.train.iter().map(|e| e.tokens.clone()).collect()
    }

    /// Tokenizes an ontology string (slot value or candidate response)
    /// with the dataset vocabulary. No truncation; these are short.
    pub fn encode_phrase(&self, phrase: &str) -> Vec<usize> {
        tokenize(phrase)
            .iter()
            .map(|t| self.vocab.id_or_unk(t))
            .collect()
    }
}
