//! The self-training loop: warm up a Teacher on the labeled pool, then
//! iterate — pseudo-label the unlabeled pool, select the most confident
//! examples into the labeled pool, train a freshly initialized Student on
//! the augmented pool with dropout, and install the Student as the next
//! Teacher. The best Student across iterations (by validation metric) is
//! returned; it does not necessarily use up all unlabeled data.

use std::collections::HashSet;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, LabelValue, SealedLabels, TaskKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::gradaug::{gradaug, GradAugConfig};
use crate::metrics::{self, Ranking};
use crate::mlm::MlmModel;
use crate::model::{fit_early_stop, TaskModel, TrainConfig};
use crate::numeric::StreamRng;

/// Where a labeled-pool entry came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Gold,
    Pseudo { iteration: usize, confidence: f64 },
}

/// One entry of the labeled pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub example: Example,
    pub provenance: Provenance,
}

/// The two data pools maintained by the loop. Disjoint by id; every
/// labeled entry carries a label, no unlabeled entry does.
#[derive(Debug, Clone)]
pub struct Pools {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<Example>,
}

impl Pools {
    /// Builds pools from a few-shot split: the labeled part is gold.
    pub fn from_split(labeled: Vec<Example>, unlabeled: Vec<Example>) -> Result<Pools> {
        let pools = Pools {
            labeled: labeled
                .into_iter()
                .map(|example| LabeledExample {
                    example,
                    provenance: Provenance::Gold,
                })
                .collect(),
            unlabeled,
        };
        pools.validate()?;
        Ok(pools)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for entry in &self.labeled {
            if entry.example.label.is_none() {
                return Err(Error::InvalidInput(format!(
                    "labeled pool entry {} has no label",
                    entry.example.id
                )));
            }
            if !seen.insert(entry.example.id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate id {} in pools",
                    entry.example.id
                )));
            }
        }
        for example in &self.unlabeled {
            if example.label.is_some() {
                return Err(Error::InvalidInput(format!(
                    "unlabeled pool entry {} carries a label",
                    example.id
                )));
            }
            if !seen.insert(example.id.as_str()) {
                return Err(Error::InvalidInput(format!(
                    "duplicate id {} in pools",
                    example.id
                )));
            }
        }
        Ok(())
    }

    /// All ids across both pools, for conservation checks.
    pub fn all_ids(&self) -> Vec<String> {
        self.labeled
            .iter()
            .map(|e| e.example.id.clone())
            .chain(self.unlabeled.iter().map(|e| e.id.clone()))
            .collect()
    }

    pub fn labeled_examples(&self) -> Vec<Example> {
        self.labeled.iter().map(|e| e.example.clone()).collect()
    }
}

/// A pseudo-labeled candidate: the Teacher's prediction and confidence
/// for one unlabeled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeled {
    pub id: String,
    pub label: LabelValue,
    pub confidence: f64,
}

/// Policy choosing which pseudo-labeled examples enter the labeled pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    /// The k most confident predictions (the main method).
    TopK,
    /// k uniformly random predictions.
    RandomK,
    /// The k least confident predictions.
    LeastK,
    /// Every prediction; selections stay in the unlabeled pool and are
    /// relabeled next iteration.
    SelectAll,
}

impl SelectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            SelectorKind::TopK => "top_k",
            SelectorKind::RandomK => "random_k",
            SelectorKind::LeastK => "least_k",
            SelectorKind::SelectAll => "select_all",
        }
    }
}

/// Self-training configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StConfig {
    /// Pseudo-labeled examples adopted per iteration (ignored by
    /// `SelectAll`).
    pub pseudo_labels_per_iteration: usize,
    pub selector: SelectorKind,
    /// Early-stop patience for the warm-up Teacher.
    pub warmup_patience: usize,
    /// Early-stop patience for each Student.
    pub student_patience: usize,
    /// Stop after this many iterations without validation improvement.
    pub outer_patience: usize,
    pub max_iterations: usize,
    /// `None` trains Students on the plain labeled pool (the
    /// "no augmentation" ablation).
    pub augmentation: Option<GradAugConfig>,
    /// `false` skips the unlabeled pool entirely and trains one Student
    /// on the augmented initial pool (the "no pseudo-labeling" ablation).
    pub pseudo_labeling: bool,
    pub train: TrainConfig,
    pub encoder: EncoderConfig,
    pub seed: u64,
}

impl Default for StConfig {
    fn default() -> Self {
        Self {
            pseudo_labels_per_iteration: 100,
            selector: SelectorKind::TopK,
            warmup_patience: 20,
            student_patience: 10,
            outer_patience: 3,
            max_iterations: 15,
            augmentation: Some(GradAugConfig::default()),
            pseudo_labeling: true,
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            seed: 0,
        }
    }
}

/// One row of the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub phase: String,
    pub labeled_size: usize,
    pub unlabeled_size: usize,
    pub selected: usize,
    pub mean_selected_confidence: Option<f64>,
    /// Fraction of selected pseudo-labels matching the sealed gold
    /// labels; evaluation-only, absent without sealed labels.
    pub pseudo_label_precision: Option<f64>,
    pub augmented_size: Option<usize>,
    pub augmentation_failures: usize,
    pub validation_metric: f64,
    pub failed: bool,
}

/// Wall-clock data, kept apart from the deterministic report body so
/// reproducibility comparisons can drop this one field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTiming {
    pub started_unix: f64,
    pub per_iteration_ms: Vec<f64>,
    pub total_ms: f64,
}

/// Full task metrics of the best model on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskMetrics {
    Intent(metrics::IntentMetrics),
    Dst(metrics::DstMetrics),
    DialogAct(metrics::F1Metrics),
    ResponseSelection { recall_at_1: f64, recall_at_3: f64 },
}

impl TaskMetrics {
    /// The headline metric used for cross-variant comparisons.
    pub fn primary(&self) -> f64 {
        match self {
            TaskMetrics::Intent(m) => m.acc_all,
            TaskMetrics::Dst(m) => m.joint_acc,
            TaskMetrics::DialogAct(m) => m.micro_f1,
            TaskMetrics::ResponseSelection { recall_at_1, .. } => *recall_at_1,
        }
    }
}

/// Machine-readable record of one self-training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub seed: u64,
    pub selector: String,
    pub iterations: Vec<IterationReport>,
    pub best_iteration: usize,
    pub best_validation_metric: f64,
    pub test_metrics: TaskMetrics,
    pub timing: RunTiming,
}

/// A finished run: the best Student (by validation metric, warm-up
/// included) plus its report.
#[derive(Debug, Clone)]
pub struct StOutcome {
    pub best_model: TaskModel,
    pub report: RunReport,
}

/// Trains the warm-up Teacher on the labeled pool with early stopping.
pub fn warmup_teacher(pools: &Pools, dataset: &Dataset, config: &StConfig) -> Result<TaskModel> {
    if pools.labeled.is_empty() {
        return Err(Error::InvalidInput("labeled pool is empty".into()));
    }
    if dataset.validation.is_empty() {
        return Err(Error::InvalidInput("validation split is empty".into()));
    }
    let seed = StreamRng::new(config.seed)
        .derive_str("model")
        .derive(0)
        .seed();
    let mut teacher = TaskModel::init(seed, dataset, &config.encoder)?;
    let fit_seed = StreamRng::new(config.seed)
        .derive_str("fit")
        .derive(0)
        .seed();
    fit_early_stop(
        &mut teacher,
        &pools.labeled_examples(),
        &dataset.validation,
        &config.train,
        config.warmup_patience,
        fit_seed,
    )?;
    Ok(teacher)
}

/// Teacher predictions over the unlabeled pool, ordered by descending
/// confidence (ties broken by example id).
pub fn pseudo_label(
    teacher: &TaskModel,
    unlabeled: &[Example],
    eval_seed: u64,
) -> Result<Vec<PseudoLabeled>> {
    let encodings = teacher.encode_ontology()?;
    let mut entries: Vec<PseudoLabeled> = unlabeled
        .par_iter()
        .map(|example| {
            let prediction = teacher
                .predict_with(&encodings, example, eval_seed)
                .map_err(|e| e.for_example(&example.id))?;
            Ok(PseudoLabeled {
                id: example.id.clone(),
                label: prediction.label,
                confidence: prediction.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    entries.sort_by(|a, b| {
        b.confidence
            .partial_cmp(&a.confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    Ok(entries)
}

/// Applies the selector policy to a priority list.
pub fn select(
    priority: &[PseudoLabeled],
    config: &StConfig,
    rng: &mut StreamRng,
) -> Vec<PseudoLabeled> {
    let k = config.pseudo_labels_per_iteration.min(priority.len());
    match config.selector {
        SelectorKind::TopK => priority[..k].to_vec(),
        SelectorKind::LeastK => priority[priority.len() - k..].to_vec(),
        SelectorKind::RandomK => {
            let mut picks = rng.sample_distinct(priority.len(), k);
            picks.sort_unstable();
            picks.into_iter().map(|i| priority[i].clone()).collect()
        }
        SelectorKind::SelectAll => priority.to_vec(),
    }
}

fn selected_precision(selected: &[PseudoLabeled], sealed: Option<&SealedLabels>) -> Option<f64> {
    let sealed = sealed?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for entry in selected {
        if let Some(gold) = sealed.gold_for_eval(&entry.id) {
            total += 1;
            if gold == &entry.label {
                correct += 1;
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Full test metrics of a model.
pub fn evaluate_full(
    model: &TaskModel,
    examples: &[Example],
    out_of_scope_class: Option<usize>,
    eval_seed: u64,
) -> Result<TaskMetrics> {
    let encodings = model.encode_ontology()?;
    match model.task {
        TaskKind::Intent => {
            let mut preds = Vec::new();
            let mut gold = Vec::new();
            for e in examples {
                let Some(LabelValue::SingleClass(g)) = e.label else {
                    return Err(Error::InvalidInput(format!("example {} unlabeled", e.id)));
                };
                let p = model.predict_with(&encodings, e, eval_seed)?;
                let LabelValue::SingleClass(c) = p.label else {
                    unreachable!()
                };
                preds.push(c);
                gold.push(g);
            }
            Ok(TaskMetrics::Intent(metrics::metric_intent(
                &preds,
                &gold,
                out_of_scope_class,
            )?))
        }
        TaskKind::Dst => {
            let mut preds = Vec::new();
            let mut gold = Vec::new();
            for e in examples {
                let Some(LabelValue::SlotAssignment(g)) = &e.label else {
                    return Err(Error::InvalidInput(format!("example {} unlabeled", e.id)));
                };
                let p = model.predict_with(&encodings, e, eval_seed)?;
                let LabelValue::SlotAssignment(a) = p.label else {
                    unreachable!()
                };
                preds.push(a);
                gold.push(g.clone());
            }
            Ok(TaskMetrics::Dst(metrics::metric_dst(&preds, &gold)?))
        }
        TaskKind::DialogAct => {
            let mut preds = Vec::new();
            let mut gold = Vec::new();
            for e in examples {
                let Some(LabelValue::MultiLabel(g)) = &e.label else {
                    return Err(Error::InvalidInput(format!("example {} unlabeled", e.id)));
                };
                let p = model.predict_with(&encodings, e, eval_seed)?;
                let LabelValue::MultiLabel(bits) = p.label else {
                    unreachable!()
                };
                preds.push(bits);
                gold.push(g.clone());
            }
            let n = gold[0].len();
            Ok(TaskMetrics::DialogAct(metrics::metric_f1(
                &preds, &gold, n,
            )?))
        }
        TaskKind::ResponseSelection => {
            let rankings: Vec<Ranking> = examples
                .iter()
                .map(|e| model.rs_rank_gold(&encodings, e, eval_seed))
                .collect::<Result<Vec<_>>>()?;
            Ok(TaskMetrics::ResponseSelection {
                recall_at_1: metrics::metric_recall_at_k(&rankings, 1)?,
                recall_at_3: metrics::metric_recall_at_k(&rankings, 3)?,
            })
        }
    }
}

/// Mutable state threaded through the iterations.
pub struct StState {
    pub pools: Pools,
    pub teacher: TaskModel,
    pub iteration: usize,
}

/// One self-training iteration: pseudo-label, select, extend the labeled
/// pool, augment, train a fresh Student, install it as Teacher. On
/// training divergence the iteration is marked failed and the previous
/// Teacher is retained.
pub fn st_iteration(
    state: &mut StState,
    dataset: &Dataset,
    mlm: &MlmModel,
    sealed: Option<&SealedLabels>,
    config: &StConfig,
) -> Result<IterationReport> {
    state.iteration += 1;
    let iteration = state.iteration;
    let root = StreamRng::new(config.seed);

    // Pseudo-labeling and selection.
    let (selected, mean_confidence, precision) = if config.pseudo_labeling {
        let priority = pseudo_label(&state.teacher, &state.pools.unlabeled, config.seed)?;
        let mut select_rng = root.derive_str("select").derive(iteration as u64);
        let selected = select(&priority, config, &mut select_rng);
        let mean = (!selected.is_empty())
            .then(|| selected.iter().map(|s| s.confidence).sum::<f64>() / selected.len() as f64);
        let precision = selected_precision(&selected, sealed);
        (selected, mean, precision)
    } else {
        (Vec::new(), None, None)
    };

    // Pool update: selections move from U to L, except under SelectAll
    // where they stay in U and are relabeled next iteration.
    let mut transient: Vec<Example> = Vec::new();
    if config.selector == SelectorKind::SelectAll {
        let by_id: std::collections::HashMap<&str, &Example> = state
            .pools
            .unlabeled
            .iter()
            .map(|e| (e.id.as_str(), e))
            .collect();
        for entry in &selected {
            let source = by_id
                .get(entry.id.as_str())
                .expect("selected id present in unlabeled pool");
            let mut example = (*source).clone();
            example.label = Some(entry.label.clone());
            transient.push(example);
        }
    } else if !selected.is_empty() {
        let chosen: std::collections::HashMap<&str, &PseudoLabeled> =
            selected.iter().map(|s| (s.id.as_str(), s)).collect();
        let mut remaining = Vec::with_capacity(state.pools.unlabeled.len() - selected.len());
        for example in state.pools.unlabeled.drain(..) {
            if let Some(entry) = chosen.get(example.id.as_str()) {
                let mut example = example;
                example.label = Some(entry.label.clone());
                state.pools.labeled.push(LabeledExample {
                    example,
                    provenance: Provenance::Pseudo {
                        iteration,
                        confidence: entry.confidence,
                    },
                });
            } else {
                remaining.push(example);
            }
        }
        state.pools.unlabeled = remaining;
    }

    // Training set: the entire updated labeled pool (plus the transient
    // relabeled set under SelectAll).
    let mut train_set = state.pools.labeled_examples();
    train_set.extend(transient);

    // Augmentation uses the *current* teacher, so the masking
    // distribution tracks it across iterations.
    let (train_set, augmented_size, augmentation_failures) = match &config.augmentation {
        Some(aug_config) => {
            let aug_seed = root.derive_str("aug").derive(iteration as u64).seed();
            let outcome = gradaug(
                &train_set,
                &state.teacher,
                mlm,
                &dataset.vocab,
                aug_config,
                aug_seed,
            )?;
            let size = outcome.augmented.len();
            let failures = outcome.failures.len();
            (outcome.augmented, Some(size), failures)
        }
        None => (train_set, None, 0),
    };

    // Student: fresh initialization every iteration, trained with dropout.
    let student_seed = root.derive_str("model").derive(iteration as u64).seed();
    let mut student = TaskModel::init(student_seed, dataset, &config.encoder)?;
    let fit_seed = root.derive_str("fit").derive(iteration as u64).seed();
    let fit_result = fit_early_stop(
        &mut student,
        &train_set,
        &dataset.validation,
        &config.train,
        config.student_patience,
        fit_seed,
    );

    let failed = match fit_result {
        Ok(_) => {
            state.teacher = student;
            false
        }
        Err(Error::Diverged(message)) => {
            log::warn!("iteration {iteration} diverged, teacher retained: {message}");
            true
        }
        Err(other) => return Err(other),
    };

    let validation_metric = state
        .teacher
        .validation_score(&dataset.validation, config.seed)?;
    Ok(IterationReport {
        iteration,
        phase: "self_training".into(),
        labeled_size: state.pools.labeled.len(),
        unlabeled_size: state.pools.unlabeled.len(),
        selected: selected.len(),
        mean_selected_confidence: mean_confidence,
        pseudo_label_precision: precision,
        augmented_size,
        augmentation_failures,
        validation_metric,
        failed,
    })
}

/// Runs the full loop and returns the best Student across iterations
/// (including the warm-up Teacher) by validation metric.
pub fn run(
    dataset: &Dataset,
    pools: Pools,
    sealed: Option<&SealedLabels>,
    mlm: &MlmModel,
    config: &StConfig,
) -> Result<StOutcome> {
    let started = Instant::now();
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    pools.validate()?;
    if let Some(aug) = &config.augmentation {
        aug.validate()?;
    }

    let mut per_iteration_ms = Vec::new();
    let warmup_start = Instant::now();
    let teacher = warmup_teacher(&pools, dataset, config)?;
    let warmup_metric = teacher.validation_score(&dataset.validation, config.seed)?;
    per_iteration_ms.push(warmup_start.elapsed().as_secs_f64() * 1000.0);

    let mut state = StState {
        pools,
        teacher,
        iteration: 0,
    };
    let mut iterations = vec![IterationReport {
        iteration: 0,
        phase: "warmup".into(),
        labeled_size: state.pools.labeled.len(),
        unlabeled_size: state.pools.unlabeled.len(),
        selected: 0,
        mean_selected_confidence: None,
        pseudo_label_precision: None,
        augmented_size: None,
        augmentation_failures: 0,
        validation_metric: warmup_metric,
        failed: false,
    }];
    let mut best_model = state.teacher.clone();
    let mut best_metric = warmup_metric;
    let mut best_iteration = 0usize;

    // "Not good enough" concretized as validation patience: stop after
    // outer_patience iterations without improvement.
    let keep_going = |state: &StState, best_iteration: usize| -> bool {
        if state.iteration >= config.max_iterations {
            return false;
        }
        if state.iteration - best_iteration >= config.outer_patience {
            return false;
        }
        if config.pseudo_labeling && state.pools.unlabeled.is_empty() {
            return false;
        }
        true
    };

    while keep_going(&state, best_iteration) {
        let iter_start = Instant::now();
        let report = st_iteration(&mut state, dataset, mlm, sealed, config)?;
        per_iteration_ms.push(iter_start.elapsed().as_secs_f64() * 1000.0);
        if report.validation_metric > best_metric && !report.failed {
            best_metric = report.validation_metric;
            best_iteration = report.iteration;
            best_model = state.teacher.clone();
        }
        iterations.push(report);
        if !config.pseudo_labeling {
            // Single augmentation round over the initial pool.
            break;
        }
    }

    let oos = dataset.ontology.oos_class();
    let test_metrics = evaluate_full(&best_model, &dataset.test, oos, config.seed)?;
    let report = RunReport {
        task: dataset.task.name().into(),
        seed: config.seed,
        selector: config.selector.name().into(),
        iterations,
        best_iteration,
        best_validation_metric: best_metric,
        test_metrics,
        timing: RunTiming {
            started_unix,
            per_iteration_ms,
            total_ms: started.elapsed().as_secs_f64() * 1000.0,
        },
    };
    Ok(StOutcome { best_model, report })
}
