//! Few-shot labeled/unlabeled splits of the train set.

use std::collections::{HashMap, HashSet};

use super::{Dataset, Example, LabelValue, TaskKind};
use crate::error::{Error, Result};
use crate::numeric::StreamRng;

/// Ground-truth labels of the examples whose labels were stripped when
/// forming the unlabeled pool. Only evaluation code may consult these (to
/// measure pseudo-label precision); the self-training loop never sees them.
#[derive(Debug, Clone)]
pub struct SealedLabels {
    gold: HashMap<String, LabelValue>,
}

impl SealedLabels {
    /// Gold label for an unlabeled example, for evaluation only.
    pub fn gold_for_eval(&self, id: &str) -> Option<&LabelValue> {
        self.gold.get(id)
    }

    pub fn len(&self) -> usize {
        self.gold.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gold.is_empty()
    }
}

/// Result of a few-shot split.
#[derive(Debug, Clone)]
pub struct FewShotSplit {
    /// Initial labeled pool L, in dataset order.
    pub labeled: Vec<Example>,
    /// Unlabeled pool U (labels stripped), in dataset order.
    pub unlabeled: Vec<Example>,
    /// Hidden gold labels for U, for pseudo-label precision reports.
    pub sealed: SealedLabels,
}

/// Samples `round(fraction * |labeled train|)` examples as the initial
/// labeled pool L; the remaining train examples form U with labels
/// stripped. Intent classification additionally guarantees at least one
/// example per class in L. Identical seeds produce identical splits.
pub fn few_shot_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<FewShotSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must be in (0, 1], got {fraction}"
        )));
    }
    let labeled_idx: Vec<usize> = (0..dataset.train.len())
        .filter(|&i| dataset.train[i].label.is_some())
        .collect();
    if labeled_idx.is_empty() {
        return Err(Error::Split("train split has no labeled examples".into()));
    }
    let quota = ((fraction * labeled_idx.len() as f64).round() as usize)
        .max(1)
        .min(labeled_idx.len());

    let mut rng = StreamRng::new(seed).derive_str("few-shot-split");
    let mut shuffled = labeled_idx.clone();
    rng.shuffle(&mut shuffled);

    let mut chosen: HashSet<usize> = HashSet::new();
    if dataset.task == TaskKind::Intent {
        // One example per class first, then fill the remaining quota.
        let mut by_class: HashMap<usize, Vec<usize>> = HashMap::new();
        for &i in &shuffled {
            if let Some(LabelValue::SingleClass(c)) = dataset.train[i].label {
                by_class.entry(c).or_default().push(i);
            }
        }
        let class_count = dataset.ontology.classes.len();
        if quota < by_class.len() {
            return Err(Error::Split(format!(
                "fraction {fraction} yields {quota} labeled examples, fewer than the {} classes \
                 present in train",
                by_class.len()
            )));
        }
        for c in 0..class_count {
            if let Some(members) = by_class.get(&c) {
                chosen.insert(members[0]);
            }
        }
    }
    for &i in &shuffled {
        if chosen.len() >= quota {
            break;
        }
        chosen.insert(i);
    }

    let mut labeled = Vec::with_capacity(quota);
    let mut unlabeled = Vec::new();
    let mut gold = HashMap::new();
    for (i, example) in dataset.train.iter().enumerate() {
        if chosen.contains(&i) {
            labeled.push(example.clone());
        } else {
            let mut stripped = example.clone();
            if let Some(label) = stripped.label.take() {
                gold.insert(stripped.id.clone(), label);
            }
            unlabeled.push(stripped);
        }
    }

    Ok(FewShotSplit {
        labeled,
        unlabeled,
        sealed: SealedLabels { gold },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synth_generate, SynthIntentSpec};

    fn small_corpus() -> Dataset {
        synth_generate(&SynthIntentSpec {
            classes: 5,
            vocab_size: 60,
            templates_per_class: 2,
            noise_rate: 0.0,
            train_size: 100,
            val_size: 20,
            test_size: 20,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn fraction_one_empties_unlabeled() {
        let ds = small_corpus();
        let split = few_shot_split(&ds, 1.0, 1).unwrap();
        assert!(split.unlabeled.is_empty());
        assert_eq!(split.labeled.len(), ds.train.len());
    }

    #[test]
    fn covers_train_exactly_once() {
        let ds = small_corpus();
        let split = few_shot_split(&ds, 0.2, 9).unwrap();
        let mut ids: Vec<&str> = split
            .labeled
            .iter()
            .chain(&split.unlabeled)
            .map(|e| e.id.as_str())
            .collect();
        ids.sort_unstable();
        let mut expected: Vec<&str> = ds.train.iter().map(|e| e.id.as_str()).collect();
        expected.sort_unstable();
        assert_eq!(ids, expected);
        assert!(split.labeled.iter().all(|e| e.label.is_some()));
        assert!(split.unlabeled.iter().all(|e| e.label.is_none()));
        assert_eq!(split.sealed.len(), split.unlabeled.len());
    }

    #[test]
    fn deterministic_per_seed() {
        let ds = small_corpus();
        let a = few_shot_split(&ds, 0.1, 7).unwrap();
        let b = few_shot_split(&ds, 0.1, 7).unwrap();
        let ids = |s: &FewShotSplit| s.labeled.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        let c = few_shot_split(&ds, 0.1, 8).unwrap();
        assert_ne!(ids(&a), ids(&c));
    }

    #[test]
    fn intent_split_keeps_every_class() {
        let ds = small_corpus();
        let split = few_shot_split(&ds, 0.06, 2).unwrap();
        let mut classes: Vec<usize> = split
            .labeled
            .iter()
            .filter_map(|e| match e.label {
                Some(LabelValue::SingleClass(c)) => Some(c),
                _ => None,
            })
            .collect();
        classes.sort_unstable();
        classes.dedup();
        assert_eq!(classes, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn one_percent_of_balanced_oos_scale_corpus_is_class_count() {
        // 15,100 balanced examples over 151 classes at 1% labeled leaves
        // exactly one labeled example per class.
        let ds = synth_generate(&SynthIntentSpec {
            classes: 151,
            vocab_size: 400,
            templates_per_class: 1,
            noise_rate: 0.0,
            train_size: 15_100,
            val_size: 151,
            test_size: 151,
            seed: 5,
        })
        .unwrap();
        let split = few_shot_split(&ds, 0.01, 11).unwrap();
        assert_eq!(split.labeled.len(), 151);
    }

    #[test]
    fn impossible_per_class_minimum_is_split_error() {
        let ds = small_corpus();
        // 1% of 100 examples is 1 labeled example < 5 classes.
        let err = few_shot_split(&ds, 0.01, 1).unwrap_err();
        assert!(matches!(err, Error::Split(_)), "{err}");
    }
}
