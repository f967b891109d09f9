//! Finite-difference verification of every hand-derived gradient: the
//! per-label scalar scores of all four heads (w.r.t. the token embedding
//! matrix), the full training losses (w.r.t. every parameter, via the SGD
//! update), and the masked-token model's update.

use selftrain_core::corpus::synth::{
    synth_dialog_act, synth_dst, synth_generate, synth_response_selection, SynthDialogActSpec,
    SynthDstSpec, SynthIntentSpec, SynthResponseSpec,
};
use selftrain_core::corpus::{Dataset, Example, LabelValue, TaskKind};
use selftrain_core::encoder::{EncoderConfig, InputEmbedding};
use selftrain_core::heads::Head;
use selftrain_core::mlm::MlmModel;
use selftrain_core::model::{ScoreContext, TaskModel};
use selftrain_core::numeric::{finite_difference_grad, gradient_relative_error, Mat64, StreamRng};

const TOLERANCE: f64 = 1e-4;

fn tiny_dataset(task: TaskKind, seed: u64) -> Dataset {
    match task {
        TaskKind::Intent => synth_generate(&SynthIntentSpec {
            classes: 3,
            vocab_size: 40,
            templates_per_class: 2,
            noise_rate: 0.0,
            train_size: 27,
            val_size: 6,
            test_size: 6,
            seed,
        })
        .unwrap(),
        TaskKind::DialogAct => synth_dialog_act(&SynthDialogActSpec {
            intents: 3,
            train_size: 27,
            val_size: 6,
            test_size: 6,
            seed,
        })
        .unwrap(),
        TaskKind::Dst => synth_dst(&SynthDstSpec {
            pairs: 2,
            values_per_pair: 3,
            train_size: 27,
            val_size: 6,
            test_size: 6,
            seed,
        })
        .unwrap(),
        TaskKind::ResponseSelection => synth_response_selection(&SynthResponseSpec {
            topics: 4,
            pool_size: 106,
            train_size: 27,
            val_size: 6,
            test_size: 6,
            seed,
        })
        .unwrap(),
    }
}

fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 8,
        hidden_dim: 6,
        dropout_rate: 0.0,
    }
}

/// Truncated example tokens so instances stay within n <= 6.
fn short_tokens(example: &Example) -> Vec<usize> {
    example.tokens.iter().take(6).copied().collect()
}

fn rs_pool_for(model: &TaskModel, label: &LabelValue, seed: u64) -> Vec<usize> {
    match (&model.head, label) {
        (Head::ResponseSelection(head), LabelValue::ResponseRef(y)) => {
            let mut rng = StreamRng::new(seed).derive_str("rs-pool");
            let mut pool = vec![*y];
            pool.extend(
                rng.sample_distinct(head.candidate_tokens.len() - 1, head.train_negatives)
                    .into_iter()
                    .map(|i| if i >= *y { i + 1 } else { i }),
            );
            pool
        }
        _ => Vec::new(),
    }
}

/// Checks the analytic score gradient w.r.t. the embedding matrix on
/// `instances` random (model, example) pairs; returns the worst error.
fn scalar_score_check(task: TaskKind, instances: usize) -> f64 {
    let dataset = tiny_dataset(task, 100 + task as u64);
    let mut worst = 0.0f64;
    for i in 0..instances {
        let model = TaskModel::init(500 + i as u64, &dataset, &small_encoder()).unwrap();
        let example = &dataset.train[i % dataset.train.len()];
        let label = example.label.clone().unwrap();
        let tokens = short_tokens(example);
        let encodings = model.encode_ontology().unwrap();
        let pool = rs_pool_for(&model, &label, 900 + i as u64);
        let ctx = ScoreContext {
            encodings: &encodings,
            rs_pool: (!pool.is_empty()).then_some(pool.as_slice()),
        };

        let input = model.encoder.embed(&tokens).unwrap();
        let analytic = model
            .grad_wrt_token_embeddings(&input, &label, &ctx)
            .unwrap();

        let (rows, cols) = (input.matrix.rows(), input.matrix.cols());
        let flat = input.matrix.as_slice().to_vec();
        let f = |x: &[f64]| {
            let probe = InputEmbedding {
                matrix: Mat64::new(rows, cols, x.to_vec()).unwrap(),
            };
            model.scalar_score_for_label(&probe, &label, &ctx).unwrap()
        };
        let fd = finite_difference_grad(f, &flat, 1e-5).unwrap();
        worst = worst.max(gradient_relative_error(analytic.as_slice(), &fd));
    }
    worst
}

#[test]
fn intent_score_gradient_matches_oracle() {
    let worst = scalar_score_check(TaskKind::Intent, 25);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn dialog_act_score_gradient_matches_oracle() {
    let worst = scalar_score_check(TaskKind::DialogAct, 25);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn dst_score_gradient_matches_oracle() {
    let worst = scalar_score_check(TaskKind::Dst, 25);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn response_selection_score_gradient_matches_oracle() {
    let worst = scalar_score_check(TaskKind::ResponseSelection, 25);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn duplicate_token_rows_receive_identical_gradients() {
    let dataset = tiny_dataset(TaskKind::Intent, 42);
    let model = TaskModel::init(3, &dataset, &small_encoder()).unwrap();
    let label = dataset.train[0].label.clone().unwrap();
    let encodings = model.encode_ontology().unwrap();
    let ctx = ScoreContext {
        encodings: &encodings,
        rs_pool: None,
    };
    let token = dataset.train[0].tokens[0];
    let input = model.encoder.embed(&[token, 5, token, 6]).unwrap();
    let grad = model
        .grad_wrt_token_embeddings(&input, &label, &ctx)
        .unwrap();
    assert_eq!(grad.row(0), grad.row(2));
}

// ---------------------------------------------------------------------
// Training-loss gradients, verified through the SGD update: one step at
// learning rate lr moves the parameters by exactly -lr * grad(mean loss),
// so (before - after) / lr must match finite differences of the loss.
// ---------------------------------------------------------------------

fn flatten_params(model: &TaskModel) -> Vec<f64> {
    let mut flat = Vec::new();
    flat.extend_from_slice(model.encoder.embedding.as_slice());
    flat.extend_from_slice(model.encoder.hidden.as_slice());
    flat.extend_from_slice(&model.encoder.bias);
    match &model.head {
        Head::Intent(h) => flat.extend_from_slice(h.weights.as_slice()),
        Head::DialogAct(h) => flat.extend_from_slice(h.weights.as_slice()),
        Head::Dst(h) => {
            for p in &h.projections {
                flat.extend_from_slice(p.as_slice());
            }
        }
        Head::ResponseSelection(_) => {}
    }
    flat
}

fn set_params(model: &mut TaskModel, flat: &[f64]) {
    let mut offset = 0usize;
    let mut take = |count: usize| {
        let slice = &flat[offset..offset + count];
        offset += count;
        slice.to_vec()
    };
    let e = &mut model.encoder;
    let n = e.embedding.as_slice().len();
    e.embedding.as_mut_slice().copy_from_slice(&take(n));
    let n = e.hidden.as_slice().len();
    e.hidden.as_mut_slice().copy_from_slice(&take(n));
    let n = e.bias.len();
    e.bias.copy_from_slice(&take(n));
    match &mut model.head {
        Head::Intent(h) => {
            let n = h.weights.as_slice().len();
            h.weights.as_mut_slice().copy_from_slice(&take(n));
        }
        Head::DialogAct(h) => {
            let n = h.weights.as_slice().len();
            h.weights.as_mut_slice().copy_from_slice(&take(n));
        }
        Head::Dst(h) => {
            for p in &mut h.projections {
                let n = p.as_slice().len();
                p.as_mut_slice().copy_from_slice(&take(n));
            }
        }
        Head::ResponseSelection(_) => {}
    }
    assert_eq!(offset, flat.len());
}

/// Mean batch loss as a pure function of the flattened parameters,
/// recomputed exactly the way `train_step` computes it (dropout off).
fn batch_loss(template: &TaskModel, flat: &[f64], batch: &[&Example]) -> f64 {
    use selftrain_core::heads;
    let mut model = template.clone();
    set_params(&mut model, flat);
    let mut total = 0.0;
    for example in batch {
        let hidden = model.hidden_of(&example.tokens).unwrap();
        let loss = match (&model.head, example.label.as_ref().unwrap()) {
            (Head::Intent(h), LabelValue::SingleClass(y)) => {
                heads::softmax_ce_grad(&h.weights.matvec(&hidden), *y)
                    .unwrap()
                    .0
            }
            (Head::DialogAct(h), LabelValue::MultiLabel(bits)) => {
                let scores = heads::da_forward(h, &hidden).unwrap();
                heads::da_loss_grad(&scores, bits).unwrap().0
            }
            (Head::Dst(h), LabelValue::SlotAssignment(assignment)) => {
                let mut loss = 0.0;
                for (pair, &target) in assignment.iter().enumerate() {
                    let projected = h.projections[pair].matvec(&hidden);
                    let scores: Vec<f64> = h.value_tokens[pair]
                        .iter()
                        .map(|tokens| {
                            let value_hidden = model.hidden_of(tokens).unwrap();
                            selftrain_core::numeric::cosine(&projected, &value_hidden).unwrap()
                        })
                        .collect();
                    loss += heads::softmax_ce_grad(&scores, target).unwrap().0;
                }
                loss
            }
            _ => unreachable!(),
        };
        total += loss;
    }
    total / batch.len() as f64
}

fn train_loss_check(task: TaskKind, instances: usize) -> f64 {
    let dataset = tiny_dataset(task, 200 + task as u64);
    let encoder = EncoderConfig {
        embed_dim: 4,
        hidden_dim: 4,
        dropout_rate: 0.0,
    };
    let mut worst = 0.0f64;
    let lr = 1e-3;
    for i in 0..instances {
        let model = TaskModel::init(700 + i as u64, &dataset, &encoder).unwrap();
        let batch: Vec<&Example> = dataset.train[(2 * i) % 20..][..2].iter().collect();
        let before = flatten_params(&model);

        let mut stepped = model.clone();
        let mut rng = StreamRng::new(1);
        stepped.train_step(&batch, lr, &mut rng).unwrap();
        let after = flatten_params(&stepped);
        let update_grad: Vec<f64> = before
            .iter()
            .zip(&after)
            .map(|(b, a)| (b - a) / lr)
            .collect();

        let f = |flat: &[f64]| batch_loss(&model, flat, &batch);
        let fd = finite_difference_grad(f, &before, 1e-5).unwrap();
        worst = worst.max(gradient_relative_error(&update_grad, &fd));
    }
    worst
}

#[test]
fn intent_training_gradients_match_oracle() {
    let worst = train_loss_check(TaskKind::Intent, 10);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn dialog_act_training_gradients_match_oracle() {
    let worst = train_loss_check(TaskKind::DialogAct, 10);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

#[test]
fn dst_training_gradients_match_oracle() {
    let worst = train_loss_check(TaskKind::Dst, 10);
    assert!(worst < TOLERANCE, "worst relative error {worst:.3e}");
}

// ---------------------------------------------------------------------
// Masked-token model update, verified the same way.
// ---------------------------------------------------------------------

fn mlm_loss(
    model: &MlmModel,
    flat: &[f64],
    corrupted: &[usize],
    position: usize,
    target: usize,
) -> f64 {
    let mut probe = model.clone();
    let n = probe.embedding.as_slice().len();
    probe.embedding.as_mut_slice().copy_from_slice(&flat[..n]);
    probe.output.as_mut_slice().copy_from_slice(&flat[n..]);
    // The training objective: plain softmax cross-entropy at the masked
    // position, reproduced via one no-op-free forward.
    let window = probe.window;
    let lo = position.saturating_sub(window);
    let hi = (position + window).min(corrupted.len() - 1);
    let mut mean = vec![0.0; probe.embedding.cols()];
    let mut count = 0usize;
    for (j, &t) in corrupted.iter().enumerate().take(hi + 1).skip(lo) {
        if j == position || selftrain_core::corpus::Vocab::is_reserved(t) {
            continue;
        }
        for (m, e) in mean.iter_mut().zip(probe.embedding.row(t)) {
            *m += e;
        }
        count += 1;
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let logits = probe.output.matvec(&mean);
    let probs = selftrain_core::numeric::softmax(&logits).unwrap();
    -probs[target].max(1e-300).ln()
}

#[test]
fn mlm_update_matches_oracle() {
    use selftrain_core::corpus::MASK;
    use selftrain_core::mlm::{mlm_train, MlmConfig};
    let words = 8usize;
    let reserved = selftrain_core::corpus::Vocab::reserved_count();
    let vocab_size = reserved + words;
    let lr = 1e-3;
    let config = MlmConfig {
        embed_dim: 4,
        window: 2,
        mask_ratio: 0.2,
        epochs: 1,
        learning_rate: lr,
    };
    for i in 0..10u64 {
        // A one-sequence corpus of 5 tokens at ratio 0.2 performs exactly
        // one masked-position update per epoch, so the parameter movement
        // must equal -lr times the gradient of that position's loss. The
        // drawn position is internal; matching any single position's
        // gradient identifies it.
        let word = reserved + (i as usize % words);
        let sequences = vec![vec![word; 5]];
        let before = mlm_train(
            &sequences,
            vocab_size,
            &MlmConfig {
                epochs: 0,
                ..config.clone()
            },
            i,
        )
        .unwrap();
        let after = mlm_train(&sequences, vocab_size, &config, i).unwrap();

        let mut flat_before = before.embedding.as_slice().to_vec();
        flat_before.extend_from_slice(before.output.as_slice());
        let mut flat_after = after.embedding.as_slice().to_vec();
        flat_after.extend_from_slice(after.output.as_slice());
        let update_grad: Vec<f64> = flat_before
            .iter()
            .zip(&flat_after)
            .map(|(b, a)| (b - a) / lr)
            .collect();

        let best = (0..5)
            .map(|position| {
                let mut corrupted = sequences[0].clone();
                corrupted[position] = MASK;
                let fd = finite_difference_grad(
                    |flat| mlm_loss(&before, flat, &corrupted, position, word),
                    &flat_before,
                    1e-5,
                )
                .unwrap();
                gradient_relative_error(&update_grad, &fd)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            best < TOLERANCE,
            "instance {i}: best relative error {best:.3e}"
        );
    }
}
