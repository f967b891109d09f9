//! Configuration-driven experiment runner: loads or generates corpora,
//! runs self-training and its ablation/selector variants over multiple
//! seeds in parallel, aggregates mean-and-deviation metrics, and writes
//! JSON plus flat CSV reports. Also hosts the built-in self-check used by
//! the CLI.

pub mod selfcheck;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::synth::{
    synth_dialog_act, synth_dst, synth_generate, synth_response_selection, SynthDialogActSpec,
    SynthDstSpec, SynthIntentSpec, SynthResponseSpec,
};
use crate::corpus::{few_shot_split, load_jsonl, load_ontology, Dataset, LoadOptions};
use crate::error::{Error, Result};
use crate::gradaug::{gradaug, MaskingMode};
use crate::mlm::{mlm_train, MlmConfig, MlmModel};
use crate::numeric::StreamRng;
use crate::st::{self, Pools, RunReport, RunTiming, SelectorKind, StConfig};

/// Where the corpus comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// JSON-lines corpus plus ontology file.
    Files { corpus: PathBuf, ontology: PathBuf },
    /// Generated in-process.
    Synth(SynthSource),
}

/// Synthetic corpus specs, one per task kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum SynthSource {
    Intent(SynthIntentSpec),
    DialogAct(SynthDialogActSpec),
    Dst(SynthDstSpec),
    ResponseSelection(SynthResponseSpec),
}

/// Pipeline variants mirroring the ablation suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Warm-up training only, no self-training.
    Baseline,
    /// The full pipeline.
    Full,
    /// Vanilla single-pass saliency instead of the smoothed one.
    WithoutSmoothSaliency,
    /// Students train on the plain labeled pool.
    WithoutAugmentation,
    /// One augmented round over the initial pool; unlabeled data unused.
    WithoutPseudoLabeling,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Full => "full",
            Variant::WithoutSmoothSaliency => "without_smooth_saliency",
            Variant::WithoutAugmentation => "without_augmentation",
            Variant::WithoutPseudoLabeling => "without_pseudo_labeling",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        match name {
            "baseline" => Ok(Variant::Baseline),
            "full" => Ok(Variant::Full),
            "without_smooth_saliency" => Ok(Variant::WithoutSmoothSaliency),
            "without_augmentation" => Ok(Variant::WithoutAugmentation),
            "without_pseudo_labeling" => Ok(Variant::WithoutPseudoLabeling),
            other => Err(Error::Config(format!("unknown variant \"{other}\""))),
        }
    }
}

pub fn selector_from_name(name: &str) -> Result<SelectorKind> {
    match name {
        "top_k" => Ok(SelectorKind::TopK),
        "random_k" => Ok(SelectorKind::RandomK),
        "least_k" => Ok(SelectorKind::LeastK),
        "select_all" => Ok(SelectorKind::SelectAll),
        other => Err(Error::Config(format!("unknown selector \"{other}\""))),
    }
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Baseline, Variant::Full]
}

fn default_selectors() -> Vec<SelectorKind> {
    vec![SelectorKind::TopK]
}

/// One experiment: a corpus, a labeled fraction, seeds, and the variant
/// and selector suites to run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub labeled_fraction: f64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub st: StConfig,
    #[serde(default)]
    pub mlm: MlmConfig,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_selectors")]
    pub selectors: Vec<SelectorKind>,
    #[serde(default)]
    pub load: LoadOptions,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "labeled fraction {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants configured".into()));
        }
        if self.selectors.is_empty() {
            return Err(Error::Config("no selectors configured".into()));
        }
        Ok(())
    }

    /// Loads or generates the corpus.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Files { corpus, ontology } => {
                let ontology = load_ontology(ontology)?;
                let task = ontology
                    .task
                    .ok_or_else(|| Error::Config("ontology file does not declare a task".into()))?;
                load_jsonl(corpus, &ontology, task, &self.load)
            }
            DataSource::Synth(source) => match source {
                SynthSource::Intent(spec) => synth_generate(spec),
                SynthSource::DialogAct(spec) => synth_dialog_act(spec),
                SynthSource::Dst(spec) => synth_dst(spec),
                SynthSource::ResponseSelection(spec) => synth_response_selection(spec),
            },
        }
    }
}

/// Resolved self-training config for one (variant, selector, seed) job.
pub fn st_config_for(
    base: &StConfig,
    variant: Variant,
    selector: SelectorKind,
    seed: u64,
) -> StConfig {
    let mut config = base.clone();
    config.selector = selector;
    config.seed = seed;
    match variant {
        Variant::Baseline => {
            config.max_iterations = 0;
            config.augmentation = None;
        }
        Variant::Full => {}
        Variant::WithoutSmoothSaliency => {
            if let Some(aug) = &mut config.augmentation {
                aug.masking = MaskingMode::VanillaSaliency;
            }
        }
        Variant::WithoutAugmentation => {
            config.augmentation = None;
        }
        Variant::WithoutPseudoLabeling => {
            config.pseudo_labeling = false;
        }
    }
    config
}

/// Mean and standard deviation of one metric across seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation; absent with fewer than two seeds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

fn summarize(values: &[f64]) -> MetricSummary {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.len() >= 2).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64).sqrt()
    });
    MetricSummary {
        per_seed: values.to_vec(),
        mean,
        std,
    }
}

/// One aggregate row: a (variant, selector) pair with its metric suite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub selector: String,
    pub metrics: BTreeMap<String, MetricSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunFailure {
    pub variant: String,
    pub selector: String,
    pub seed: u64,
    pub message: String,
}

/// A per-run report with its timing lifted out, so the whole experiment
/// report is byte-reproducible apart from the single `timing` field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub selector: String,
    pub seed: u64,
    pub report: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTimingRecord {
    pub variant: String,
    pub selector: String,
    pub seed: u64,
    pub timing: RunTiming,
}

/// All wall-clock data of an experiment, segregated from the
/// deterministic body.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentTiming {
    pub started_unix: f64,
    pub total_ms: f64,
    pub per_run: Vec<RunTimingRecord>,
}

/// Aggregated experiment results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: String,
    pub labeled_fraction: f64,
    pub seeds: Vec<u64>,
    pub rows: Vec<AggregateRow>,
    pub failures: Vec<RunFailure>,
    pub runs: Vec<RunRecord>,
    pub timing: ExperimentTiming,
}

impl ExperimentReport {
    /// The report body with the timing field dropped, for reproducibility
    /// comparisons.
    pub fn deterministic_body(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("report serializes");
        value.as_object_mut().expect("object").remove("timing");
        value
    }
}

/// Flattens a metric struct into name -> value pairs, dropping absent
/// optional metrics.
fn flatten_metrics(metrics: &st::TaskMetrics) -> BTreeMap<String, f64> {
    let value = serde_json::to_value(metrics).expect("metrics serialize");
    let mut out = BTreeMap::new();
    if let serde_json::Value::Object(map) = value {
        for (key, v) in map {
            if key == "task" {
                continue;
            }
            if let Some(number) = v.as_f64() {
                out.insert(key, number);
            }
        }
    }
    out
}

/// Splits a run report into its deterministic body and its timing.
fn detach_timing(report: &RunReport) -> (serde_json::Value, RunTiming) {
    let mut value = serde_json::to_value(report).expect("report serializes");
    value.as_object_mut().expect("object").remove("timing");
    (value, report.timing.clone())
}

/// Runs every (variant, selector, seed) job: split, masked-token
/// pre-training, self-training, metric aggregation. Failing jobs are
/// recorded without aborting their siblings.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let started_unix = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let dataset = config.dataset()?;

    // Per-seed shared work: the split and the frozen masked-token model.
    struct SeedContext {
        seed: u64,
        split: crate::corpus::FewShotSplit,
        mlm: MlmModel,
    }
    let contexts: Vec<Result<SeedContext>> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let split = few_shot_split(&dataset, config.labeled_fraction, seed)?;
            let mlm_seed = StreamRng::new(seed).derive_str("mlm").seed();
            let mlm = mlm_train(
                &dataset.train_token_sequences(),
                dataset.vocab.size(),
                &config.mlm,
                mlm_seed,
            )?;
            Ok(SeedContext { seed, split, mlm })
        })
        .collect();
    let mut seed_contexts = Vec::with_capacity(contexts.len());
    for context in contexts {
        seed_contexts.push(context?);
    }

    // Baseline ignores the selector; run it once per seed.
    let mut jobs: Vec<(Variant, SelectorKind)> = Vec::new();
    for &variant in &config.variants {
        if variant == Variant::Baseline {
            jobs.push((variant, config.st.selector));
        } else {
            for &selector in &config.selectors {
                jobs.push((variant, selector));
            }
        }
    }
    jobs.dedup();

    let dataset_ref = &dataset;
    let results: Vec<(
        Variant,
        SelectorKind,
        u64,
        std::result::Result<RunReport, String>,
    )> = jobs
        .par_iter()
        .flat_map(|&(variant, selector)| {
            seed_contexts
                .par_iter()
                .map(move |context| {
                    let st_config = st_config_for(&config.st, variant, selector, context.seed);
                    let outcome = Pools::from_split(
                        context.split.labeled.clone(),
                        context.split.unlabeled.clone(),
                    )
                    .and_then(|pools| {
                        st::run(
                            dataset_ref,
                            pools,
                            Some(&context.split.sealed),
                            &context.mlm,
                            &st_config,
                        )
                    });
                    match outcome {
                        Ok(outcome) => (variant, selector, context.seed, Ok(outcome.report)),
                        Err(e) => (variant, selector, context.seed, Err(e.to_string())),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    // Sequential aggregation in job order.
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut runs = Vec::new();
    let mut per_run_timing = Vec::new();
    for &(variant, selector, _) in jobs
        .iter()
        .map(|(v, s)| (*v, *s, ()))
        .collect::<Vec<_>>()
        .iter()
    {
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (rv, rs, seed, result) in &results {
            if (*rv, *rs) != (variant, selector) {
                continue;
            }
            match result {
                Ok(report) => {
                    let (body, timing) = detach_timing(report);
                    runs.push(RunRecord {
                        variant: variant.name().into(),
                        selector: selector.name().into(),
                        seed: *seed,
                        report: body,
                    });
                    per_run_timing.push(RunTimingRecord {
                        variant: variant.name().into(),
                        selector: selector.name().into(),
                        seed: *seed,
                        timing,
                    });
                    for (name, value) in flatten_metrics(&report.test_metrics) {
                        per_metric.entry(name).or_default().push(value);
                    }
                }
                Err(message) => failures.push(RunFailure {
                    variant: variant.name().into(),
                    selector: selector.name().into(),
                    seed: *seed,
                    message: message.clone(),
                }),
            }
        }
        if !per_metric.is_empty() {
            rows.push(AggregateRow {
                variant: variant.name().into(),
                selector: selector.name().into(),
                metrics: per_metric
                    .into_iter()
                    .map(|(name, values)| (name, summarize(&values)))
                    .collect(),
            });
        }
    }

    let report = ExperimentReport {
        task: dataset.task.name().into(),
        labeled_fraction: config.labeled_fraction,
        seeds: config.seeds.clone(),
        rows,
        failures,
        runs,
        timing: ExperimentTiming {
            started_unix,
            total_ms: started.elapsed().as_secs_f64() * 1000.0,
            per_run: per_run_timing,
        },
    };

    if let Some(dir) = &config.output_dir {
        write_artifacts(dir, &report)?;
    }
    Ok(report)
}

/// Writes the JSON report plus a flat CSV of per-seed and aggregate
/// metric values.
pub fn write_artifacts(dir: &Path, report: &ExperimentReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json_path = dir.join("experiment.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(report)?)?;

    let csv_path = dir.join("experiment.csv");
    let mut csv = std::fs::File::create(&csv_path)?;
    writeln!(csv, "variant,selector,seed,metric,value")?;
    for row in &report.rows {
        for (metric, summary) in &row.metrics {
            for (seed, value) in report.seeds.iter().zip(&summary.per_seed) {
                writeln!(
                    csv,
                    "{},{},{},{},{}",
                    row.variant, row.selector, seed, metric, value
                )?;
            }
            writeln!(
                csv,
                "{},{},mean,{},{}",
                row.variant, row.selector, metric, summary.mean
            )?;
            if let Some(std) = summary.std {
                writeln!(
                    csv,
                    "{},{},std,{},{}",
                    row.variant, row.selector, metric, std
                )?;
            }
        }
    }
    Ok(())
}

/// Trains the pipeline prerequisites and writes the augmentation dump
/// (one JSON object per generated augmentation) for audit. Returns the
/// dump path.
pub fn run_augment_dump(config: &ExperimentConfig, dir: &Path) -> Result<PathBuf> {
    config.validate()?;
    let dataset = config.dataset()?;
    let seed = config.seeds[0];
    let split = few_shot_split(&dataset, config.labeled_fraction, seed)?;
    let mlm_seed = StreamRng::new(seed).derive_str("mlm").seed();
    let mlm = mlm_train(
        &dataset.train_token_sequences(),
        dataset.vocab.size(),
        &config.mlm,
        mlm_seed,
    )?;
    let st_config = st_config_for(&config.st, Variant::Full, config.st.selector, seed);
    let pools = Pools::from_split(split.labeled, split.unlabeled)?;
    let teacher = st::warmup_teacher(&pools, &dataset, &st_config)?;
    let aug_config = st_config
        .augmentation
        .as_ref()
        .ok_or_else(|| Error::Config("augmentation disabled in config".into()))?;
    let aug_seed = StreamRng::new(seed).derive_str("aug").derive(1).seed();
    let outcome = gradaug(
        &pools.labeled_examples(),
        &teacher,
        &mlm,
        &dataset.vocab,
        aug_config,
        aug_seed,
    )?;

    std::fs::create_dir_all(dir)?;
    let path = dir.join("augmentations.jsonl");
    let mut file = std::fs::File::create(&path)?;
    for record in &outcome.records {
        writeln!(file, "{}", serde_json::to_string(record)?)?;
    }
    Ok(path)
}

/// Builds the global worker pool from an explicit count or the
/// `ST_WORKERS` environment variable. Call once at startup.
pub fn init_worker_pool(workers: Option<usize>) -> Result<()> {
    let count = match workers {
        Some(n) => Some(n),
        None => std::env::var("ST_WORKERS")
            .ok()
            .map(|v| {
                v.parse::<usize>()
                    .map_err(|_| Error::Config(format!("ST_WORKERS=\"{v}\" is not a worker count")))
            })
            .transpose()?,
    };
    if let Some(count) = count {
        rayon::ThreadPoolBuilder::new()
            .num_threads(count.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_experiment(seeds: Vec<u64>) -> ExperimentConfig {
        ExperimentConfig {
            data: DataSource::Synth(SynthSource::Intent(SynthIntentSpec {
                classes: 3,
                vocab_size: 50,
                templates_per_class: 2,
                noise_rate: 0.0,
                train_size: 60,
                val_size: 12,
                test_size: 12,
                seed: 17,
            })),
            labeled_fraction: 0.2,
            seeds,
            st: StConfig {
                pseudo_labels_per_iteration: 20,
                warmup_patience: 4,
                student_patience: 3,
                outer_patience: 2,
                max_iterations: 2,
                augmentation: Some(crate::gradaug::GradAugConfig {
                    noise_count: 2,
                    ..Default::default()
                }),
                train: crate::model::TrainConfig {
                    learning_rate: 0.5,
                    batch_size: 16,
                    max_epochs: 12,
                },
                encoder: crate::encoder::EncoderConfig {
                    embed_dim: 10,
                    hidden_dim: 8,
                    dropout_rate: 0.1,
                },
                ..Default::default()
            },
            mlm: MlmConfig {
                epochs: 2,
                ..Default::default()
            },
            variants: vec![Variant::Baseline, Variant::Full],
            selectors: vec![SelectorKind::TopK],
            load: LoadOptions::default(),
            output_dir: None,
        }
    }

    #[test]
    fn selector_suite_produces_one_row_per_selector() {
        let mut config = tiny_experiment(vec![1]);
        config.variants = vec![Variant::Full];
        config.selectors = vec![
            SelectorKind::TopK,
            SelectorKind::RandomK,
            SelectorKind::LeastK,
            SelectorKind::SelectAll,
        ];
        config.st.max_iterations = 1;
        let report = run_experiment(&config).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        let rows: Vec<(String, String)> = report
            .rows
            .iter()
            .map(|r| (r.variant.clone(), r.selector.clone()))
            .collect();
        assert_eq!(
            rows,
            vec![
                ("full".into(), "top_k".into()),
                ("full".into(), "random_k".into()),
                ("full".into(), "least_k".into()),
                ("full".into(), "select_all".into()),
            ]
        );
    }

    #[test]
    fn file_data_source_loads_and_runs() {
        let dir = tempfile::tempdir().unwrap();
        let synth = tiny_experiment(vec![1]);
        let dataset = synth.dataset().unwrap();
        let corpus_path = dir.path().join("corpus.jsonl");
        let ontology_path = dir.path().join("ontology.json");
        crate::corpus::save_jsonl(&corpus_path, &dataset).unwrap();
        crate::corpus::save_ontology(&ontology_path, &dataset.ontology).unwrap();

        let mut config = tiny_experiment(vec![1]);
        config.data = DataSource::Files {
            corpus: corpus_path,
            ontology: ontology_path,
        };
        assert_eq!(config.dataset().unwrap(), dataset);
        let report = run_experiment(&config).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        assert_eq!(report.task, "intent");
    }

    #[test]
    fn experiment_produces_per_seed_reports_and_aggregate() {
        let config = tiny_experiment(vec![1, 2, 3]);
        let report = run_experiment(&config).unwrap();
        assert!(report.failures.is_empty(), "{:?}", report.failures);
        // Two variants, three seeds each.
        assert_eq!(report.runs.len(), 6);
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            let acc = &row.metrics["acc_all"];
            assert_eq!(acc.per_seed.len(), 3);
            assert!(acc.std.is_some());
            assert!(acc.mean >= 0.0 && acc.mean <= 1.0);
        }
    }

    #[test]
    fn single_seed_omits_std() {
        let config = tiny_experiment(vec![5]);
        let report = run_experiment(&config).unwrap();
        for row in &report.rows {
            assert!(row.metrics["acc_all"].std.is_none());
        }
    }

    #[test]
    fn experiment_is_reproducible_modulo_timing() {
        let config = tiny_experiment(vec![4]);
        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        let bytes = |r: &ExperimentReport| serde_json::to_string(&r.deterministic_body()).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn variant_and_selector_names_round_trip() {
        for v in [
            Variant::Baseline,
            Variant::Full,
            Variant::WithoutSmoothSaliency,
            Variant::WithoutAugmentation,
            Variant::WithoutPseudoLabeling,
        ] {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        for s in [
            SelectorKind::TopK,
            SelectorKind::RandomK,
            SelectorKind::LeastK,
            SelectorKind::SelectAll,
        ] {
            assert_eq!(selector_from_name(s.name()).unwrap(), s);
        }
        assert!(Variant::from_name("bogus").is_err());
        assert!(selector_from_name("bogus").is_err());
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_experiment(vec![1]);
        config.output_dir = Some(dir.path().to_path_buf());
        run_experiment(&config).unwrap();
        assert!(dir.path().join("experiment.json").exists());
        let csv = std::fs::read_to_string(dir.path().join("experiment.csv")).unwrap();
        assert!(csv.starts_with("variant,selector,seed,metric,value"));
        assert!(csv.contains("full,top_k,mean,acc_all,"));
    }

    #[test]
    fn augment_dump_writes_records() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_experiment(vec![1]);
        let path = run_augment_dump(&config, dir.path()).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // 12 labeled examples (0.2 of 60), q = 3 augmentations each.
        assert_eq!(lines.len(), 36);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert!(first.get("source_id").is_some());
        assert!(first.get("masked_positions").is_some());
        assert!(first.get("saliency").is_some());
    }
}
