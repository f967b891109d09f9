//! Built-in verification suite behind the CLI `check` subcommand: fast
//! gradient and distribution checks against independent oracles, printing
//! one pass/fail line each.

use crate::corpus::synth::{
    synth_dialog_act, synth_dst, synth_generate, synth_response_selection, SynthDialogActSpec,
    SynthDstSpec, SynthIntentSpec, SynthResponseSpec,
};
use crate::corpus::{Dataset, TaskKind};
use crate::encoder::{EncoderConfig, InputEmbedding};
use crate::error::Result;
use crate::gradaug::{self, GradAugConfig, ModelScorer};
use crate::heads::Head;
use crate::metrics;
use crate::mlm::{mlm_predict, mlm_train, MlmConfig};
use crate::model::{ScoreContext, TaskModel};
use crate::numeric::{finite_difference_grad, gradient_relative_error, Mat64, StreamRng};

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &str, body: impl FnOnce() -> Result<String>) -> CheckResult {
    match body() {
        Ok(detail) => CheckResult {
            name: name.into(),
            passed: true,
            detail,
        },
        Err(e) => CheckResult {
            name: name.into(),
            passed: false,
            detail: e.to_string(),
        },
    }
}

fn fail(message: String) -> crate::error::Error {
    crate::error::Error::InvalidInput(message)
}

fn tiny_dataset(task: TaskKind, seed: u64) -> Result<Dataset> {
    match task {
        TaskKind::Intent => synth_generate(&SynthIntentSpec {
            classes: 3,
            vocab_size: 40,
            templates_per_class: 2,
            noise_rate: 0.0,
            train_size: 18,
            val_size: 6,
            test_size: 6,
            seed,
        }),
        TaskKind::DialogAct => synth_dialog_act(&SynthDialogActSpec {
            intents: 3,
            train_size: 18,
            val_size: 6,
            test_size: 6,
            seed,
        }),
        TaskKind::Dst => synth_dst(&SynthDstSpec {
            pairs: 2,
            values_per_pair: 3,
            train_size: 18,
            val_size: 6,
            test_size: 6,
            seed,
        }),
        TaskKind::ResponseSelection => synth_response_selection(&SynthResponseSpec {
            topics: 4,
            pool_size: 106,
            train_size: 18,
            val_size: 6,
            test_size: 6,
            seed,
        }),
    }
}

/// Largest relative error between the analytic embedding-matrix gradient
/// and central finite differences over random instances of one task head.
pub fn max_gradient_relative_error(task: TaskKind, instances: usize, seed: u64) -> Result<f64> {
    let dataset = tiny_dataset(task, seed)?;
    let mut worst = 0.0f64;
    for instance in 0..instances {
        let model_seed = StreamRng::new(seed).derive(instance as u64).seed();
        let model = TaskModel::init(
            model_seed,
            &dataset,
            &EncoderConfig {
                embed_dim: 6,
                hidden_dim: 5,
                dropout_rate: 0.0,
            },
        )?;
        let example = &dataset.train[instance % dataset.train.len()];
        let label = example.label.clone().expect("synthetic data is labeled");
        let encodings = model.encode_ontology()?;
        let pool: Vec<usize> = match (&model.head, &label) {
            (Head::ResponseSelection(head), crate::corpus::LabelValue::ResponseRef(y)) => {
                let mut rng = StreamRng::new(seed).derive(1000 + instance as u64);
                let mut pool = vec![*y];
                pool.extend(
                    rng.sample_distinct(head.candidate_tokens.len() - 1, head.train_negatives)
                        .into_iter()
                        .map(|i| if i >= *y { i + 1 } else { i }),
                );
                pool
            }
            _ => Vec::new(),
        };
        let ctx = ScoreContext {
            encodings: &encodings,
            rs_pool: (!pool.is_empty()).then_some(pool.as_slice()),
        };
        let input = model.encoder.embed(&example.tokens)?;
        let analytic = model.grad_wrt_token_embeddings(&input, &label, &ctx)?;

        let (rows, cols) = (input.matrix.rows(), input.matrix.cols());
        let flat = input.matrix.as_slice().to_vec();
        let f = |x: &[f64]| {
            let probe = InputEmbedding {
                matrix: Mat64::new(rows, cols, x.to_vec()).expect("finite probe"),
            };
            model
                .scalar_score_for_label(&probe, &label, &ctx)
                .expect("score evaluates")
        };
        let fd = finite_difference_grad(f, &flat, 1e-5)?;
        worst = worst.max(gradient_relative_error(analytic.as_slice(), &fd));
    }
    Ok(worst)
}

/// Exact inclusion probabilities of sequential weighted sampling without
/// replacement (draw, remove, renormalize), by enumerating draw orders.
pub fn enumeration_inclusion_probabilities(weights: &[f64], draws: usize) -> Vec<f64> {
    fn recurse(
        weights: &[f64],
        remaining: &mut Vec<usize>,
        draws: usize,
        probability: f64,
        inclusion: &mut [f64],
    ) {
        if draws == 0 {
            return;
        }
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        for slot in 0..remaining.len() {
            let index = remaining[slot];
            let p = if total > 0.0 {
                weights[index] / total
            } else {
                1.0 / remaining.len() as f64
            };
            if p == 0.0 {
                continue;
            }
            inclusion[index] += probability * p;
            let removed = remaining.remove(slot);
            recurse(weights, remaining, draws - 1, probability * p, inclusion);
            remaining.insert(slot, removed);
        }
    }
    let mut inclusion = vec![0.0; weights.len()];
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    recurse(weights, &mut remaining, draws, 1.0, &mut inclusion);
    inclusion
}

/// Runs the whole suite.
pub fn run_all() -> Vec<CheckResult> {
    let mut results = Vec::new();

    for task in [
        TaskKind::Intent,
        TaskKind::DialogAct,
        TaskKind::Dst,
        TaskKind::ResponseSelection,
    ] {
        results.push(check(&format!("gradient-oracle-{}", task.name()), || {
            let worst = max_gradient_relative_error(task, 5, 7)?;
            if worst < 1e-4 {
                Ok(format!("max relative error {worst:.2e}"))
            } else {
                Err(fail(format!("relative error {worst:.2e} >= 1e-4")))
            }
        }));
    }

    results.push(check("smooth-saliency-zero-variance", || {
        let dataset = tiny_dataset(TaskKind::Intent, 3)?;
        let model = TaskModel::init(
            11,
            &dataset,
            &EncoderConfig {
                embed_dim: 6,
                hidden_dim: 5,
                dropout_rate: 0.0,
            },
        )?;
        let example = &dataset.train[0];
        let label = example.label.clone().unwrap();
        let encodings = model.encode_ontology()?;
        let scorer = ModelScorer {
            model: &model,
            label: &label,
            ctx: ScoreContext {
                encodings: &encodings,
                rs_pool: None,
            },
        };
        let input = model.encoder.embed(&example.tokens)?;
        let plain = gradaug::saliency(&scorer, &input.matrix)?;
        let config = GradAugConfig {
            noise_variance: 0.0,
            ..Default::default()
        };
        let smooth = gradaug::smooth_saliency(&scorer, &input.matrix, &config, &StreamRng::new(1))?;
        if plain == smooth {
            Ok("bit-identical".into())
        } else {
            Err(fail("zero-variance smoothing differs from saliency".into()))
        }
    }));

    results.push(check("masking-distribution", || {
        let p = gradaug::masking_probability(&[1.0, 2.0, 4.0], 1.0, 1e-6);
        if p != vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0] {
            return Err(fail(format!("hand case produced {p:?}")));
        }
        let mut rng = StreamRng::new(5);
        for _ in 0..1000 {
            let n = 1 + rng.below(12);
            let m: Vec<f64> = (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let p = gradaug::masking_probability(&m, 1.0, 1e-6);
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || p.iter().any(|&v| v < 0.0) {
                return Err(fail(format!("invalid distribution {p:?} for {m:?}")));
            }
            for i in 0..n {
                for j in 0..n {
                    if m[i].abs() > m[j].abs() && p[i] >= p[j] {
                        return Err(fail(format!(
                            "monotonicity violated at ({i}, {j}) for {m:?}"
                        )));
                    }
                }
            }
        }
        Ok("hand case exact; 1000 random inputs valid and monotone".into())
    }));

    results.push(check("weighted-sampler-oracle", || {
        let weights = [0.4, 0.05, 0.25, 0.05, 0.25];
        let draws = 2usize;
        let expected = enumeration_inclusion_probabilities(&weights, draws);
        let tokens = vec![9usize; weights.len()];
        let mut counts = vec![0usize; weights.len()];
        let trials = 30_000usize;
        let mut rng = StreamRng::new(6);
        for _ in 0..trials {
            // mask_ratio 0.4 of 5 tokens = 2 draws.
            let (_, positions) = gradaug::mask_tokens(&tokens, &weights, 0.4, &mut rng)?;
            for &p in &positions {
                counts[p] += 1;
            }
        }
        for (i, &count) in counts.iter().enumerate() {
            let observed = count as f64 / trials as f64;
            if (observed - expected[i]).abs() > 0.02 {
                return Err(fail(format!(
                    "position {i}: observed {observed:.4}, oracle {:.4}",
                    expected[i]
                )));
            }
        }
        Ok("inclusion frequencies match enumeration".into())
    }));

    results.push(check("masked-token-model", || {
        let dataset = tiny_dataset(TaskKind::Intent, 9)?;
        let mlm = mlm_train(
            &dataset.train_token_sequences(),
            dataset.vocab.size(),
            &MlmConfig {
                epochs: 2,
                ..Default::default()
            },
            3,
        )?;
        let mut tokens = dataset.train[0].tokens.clone();
        tokens[0] = crate::corpus::MASK;
        let dists = mlm_predict(&mlm, &tokens, &[0])?;
        let sum: f64 = dists[0].iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(fail(format!("distribution sums to {sum}")));
        }
        for (id, &p) in dists[0]
            .iter()
            .enumerate()
            .take(crate::corpus::Vocab::reserved_count())
        {
            if p != 0.0 {
                return Err(fail(format!("reserved token {id} got probability")));
            }
        }
        Ok("distributions normalized, reserved tokens excluded".into())
    }));

    results.push(check("metric-hand-cases", || {
        let intent = metrics::metric_intent(&[0, 1], &[0, 9], Some(9))?;
        if (intent.acc_all - 0.5).abs() > 1e-12 || intent.recall_out != Some(0.0) {
            return Err(fail(format!("intent hand case produced {intent:?}")));
        }
        let f1 = metrics::metric_f1(
            &[vec![true, false], vec![true, false]],
            &[vec![true, false], vec![false, true]],
            2,
        )?;
        if (f1.micro_f1 - 0.5).abs() > 1e-12 || (f1.macro_f1 - 1.0 / 3.0).abs() > 1e-12 {
            return Err(fail(format!("f1 hand case produced {f1:?}")));
        }
        let rankings = vec![
            metrics::Ranking {
                ordered_candidates: vec![3, 1],
                true_candidate: 3,
            },
            metrics::Ranking {
                ordered_candidates: vec![1, 3],
                true_candidate: 3,
            },
        ];
        let r1 = metrics::metric_recall_at_k(&rankings, 1)?;
        if (r1 - 0.5).abs() > 1e-12 {
            return Err(fail(format!("recall@1 hand case produced {r1}")));
        }
        Ok("intent, f1 and recall hand cases exact".into())
    }));

    results
}

/// Prints one line per check and returns whether everything passed.
pub fn print_and_tally(results: &[CheckResult]) -> bool {
    let mut all_passed = true;
    for result in results {
        let status = if result.passed { "ok" } else { "FAIL" };
        println!("[{status}] {}: {}", result.name, result.detail);
        all_passed &= result.passed;
    }
    all_passed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let results = run_all();
        for result in &results {
            assert!(result.passed, "{}: {}", result.name, result.detail);
        }
        assert_eq!(results.len(), 9);
    }

    #[test]
    fn enumeration_inclusion_sums_to_draw_count() {
        let inclusion = enumeration_inclusion_probabilities(&[0.5, 0.3, 0.2], 2);
        let total: f64 = inclusion.iter().sum();
        assert!((total - 2.0).abs() < 1e-12);
        // More weight, more inclusion.
        assert!(inclusion[0] > inclusion[1] && inclusion[1] > inclusion[2]);
    }
}
