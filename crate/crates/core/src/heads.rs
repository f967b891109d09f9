//! Task-specific output networks and the unified decision rules that turn
//! raw scores into a predicted label plus a confidence in [0, 1].
//!
//! Four heads are supported:
//! - intent classification: softmax over `W1 * h`,
//! - dialog-state tracking: per-(domain, slot) cosine between a projected
//!   input and encoded slot values, trained with cross-entropy summed over
//!   pairs,
//! - dialog-act prediction: element-wise sigmoid over `W2 * h`, thresholded
//!   at 0.5,
//! - response selection: cosine between encoded context and encoded
//!   candidates, trained to rank the ground truth against sampled
//!   negatives.

use serde::{Deserialize, Serialize};

use crate::corpus::LabelValue;
use crate::error::{Error, Result};
use crate::numeric::{self, Mat64, StreamRng};

/// Inference threshold for dialog-act prediction. A score exactly at the
/// threshold counts as positive.
pub const DA_THRESHOLD: f64 = 0.5;
/// Negative responses sampled per training example (response selection).
pub const TRAIN_NEGATIVES: usize = 20;
/// Negative responses sampled per evaluation example (response selection).
pub const EVAL_NEGATIVES: usize = 100;

/// Intent-classification head: an I x l weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentHead {
    pub weights: Mat64,
}

/// Dialog-act head: an N x l weight matrix; threshold fixed at 0.5.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaHead {
    pub weights: Mat64,
}

/// Dialog-state head: one l x l projection per (domain, slot) pair plus
/// the tokenized ontology values each pair scores against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DstHead {
    pub projections: Vec<Mat64>,
    /// Per pair, per value, the value's token sequence.
    pub value_tokens: Vec<Vec<Vec<usize>>>,
}

/// Response-selection head: the tokenized candidate pool. The dual
/// encoder itself is the shared text encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsHead {
    pub candidate_tokens: Vec<Vec<usize>>,
    pub train_negatives: usize,
    pub eval_negatives: usize,
}

/// One trained head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Head {
    Intent(IntentHead),
    DialogAct(DaHead),
    Dst(DstHead),
    ResponseSelection(RsHead),
}

/// Gradient accumulator for head parameters.
#[derive(Debug, Clone)]
pub enum HeadGrads {
    Intent(Mat64),
    DialogAct(Mat64),
    Dst(Vec<Mat64>),
    ResponseSelection,
}

impl Head {
    pub fn zero_grads(&self) -> HeadGrads {
        match self {
            Head::Intent(h) => HeadGrads::Intent(Mat64::zeros(h.weights.rows(), h.weights.cols())),
            Head::DialogAct(h) => {
                HeadGrads::DialogAct(Mat64::zeros(h.weights.rows(), h.weights.cols()))
            }
            Head::Dst(h) => HeadGrads::Dst(
                h.projections
                    .iter()
                    .map(|p| Mat64::zeros(p.rows(), p.cols()))
                    .collect(),
            ),
            Head::ResponseSelection(_) => HeadGrads::ResponseSelection,
        }
    }

    pub fn apply_grads(&mut self, grads: &HeadGrads, lr: f64) {
        match (self, grads) {
            (Head::Intent(h), HeadGrads::Intent(g)) => h.weights.add_scaled(g, -lr),
            (Head::DialogAct(h), HeadGrads::DialogAct(g)) => h.weights.add_scaled(g, -lr),
            (Head::Dst(h), HeadGrads::Dst(gs)) => {
                for (p, g) in h.projections.iter_mut().zip(gs) {
                    p.add_scaled(g, -lr);
                }
            }
            (Head::ResponseSelection(_), HeadGrads::ResponseSelection) => {}
            _ => unreachable!("head/grad variant mismatch"),
        }
    }
}

/// Softmax distribution over intents: `softmax(W1 * h)`.
pub fn intent_forward(head: &IntentHead, hidden: &[f64]) -> Result<Vec<f64>> {
    numeric::softmax(&head.weights.matvec(hidden))
}

/// Element-wise Bernoulli scores: `sigmoid(W2 * h)`.
pub fn da_forward(head: &DaHead, hidden: &[f64]) -> Result<Vec<f64>> {
    head.weights
        .matvec(hidden)
        .into_iter()
        .map(numeric::sigmoid)
        .collect()
}

/// Cosine scores of pair `j`'s values against the projected input:
/// `cosine(G_j * h, A(v_i))` for each encoded value `v_i`.
pub fn dst_score(
    head: &DstHead,
    hidden: &[f64],
    pair: usize,
    value_encodings: &[Vec<f64>],
) -> Result<Vec<f64>> {
    if pair >= head.projections.len() {
        return Err(Error::IndexOutOfRange(format!(
            "pair {pair} outside {} projections",
            head.projections.len()
        )));
    }
    let projected = head.projections[pair].matvec(hidden);
    value_encodings
        .iter()
        .map(|v| numeric::cosine(&projected, v))
        .collect()
}

/// Cosine between the encoded context and one encoded candidate.
pub fn rs_score(context: &[f64], candidate: &[f64]) -> Result<f64> {
    numeric::cosine(context, candidate)
}

/// Argmax with ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Intent decision: argmax class and its softmax probability.
pub fn decide_intent(probs: &[f64]) -> (usize, f64) {
    let best = argmax(probs);
    (best, probs[best])
}

/// Dialog-act decision: the thresholded label set and its confidence —
/// the mean score over predicted-positive intents, or the mean of
/// `1 - a` over all intents when no score crosses the threshold (the
/// model's confidence in the all-negative prediction).
pub fn decide_da(scores: &[f64]) -> (Vec<bool>, f64) {
    let bits: Vec<bool> = scores.iter().map(|&a| a >= DA_THRESHOLD).collect();
    let confidence = da_set_score(scores, &bits);
    (bits, confidence)
}

/// Mean score of the positive intents in `bits`, falling back to the mean
/// of `1 - a` over all intents for an empty set.
pub fn da_set_score(scores: &[f64], bits: &[bool]) -> f64 {
    let positives = bits.iter().filter(|&&b| b).count();
    if positives == 0 {
        scores.iter().map(|a| 1.0 - a).sum::<f64>() / scores.len() as f64
    } else {
        scores
            .iter()
            .zip(bits)
            .filter_map(|(a, &b)| b.then_some(*a))
            .sum::<f64>()
            / positives as f64
    }
}

/// Dialog-state decision over per-pair score vectors: the argmax value of
/// each pair under softmax, with confidence the mean winning probability.
pub fn decide_dst(per_pair_scores: &[Vec<f64>]) -> Result<(Vec<usize>, f64)> {
    let mut assignment = Vec::with_capacity(per_pair_scores.len());
    let mut total = 0.0;
    for scores in per_pair_scores {
        let probs = numeric::softmax(scores)?;
        let best = argmax(&probs);
        assignment.push(best);
        total += probs[best];
    }
    Ok((assignment, total / per_pair_scores.len() as f64))
}

/// Response decision over a scored pool: the top-ranked pool position and
/// its softmax-normalized score.
pub fn decide_rs(pool_scores: &[f64]) -> Result<(usize, f64)> {
    let probs = numeric::softmax(pool_scores)?;
    let best = argmax(&probs);
    Ok((best, probs[best]))
}

/// Ranks pool positions by score, descending, ties by lower index.
pub fn rank_pool(pool_scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pool_scores.len()).collect();
    order.sort_by(|&a, &b| {
        pool_scores[b]
            .partial_cmp(&pool_scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Softmax probability of `target` plus its gradient w.r.t. the scores:
/// `d q_t / d s_i = q_t (δ_ti - q_i)`.
pub fn softmax_prob_grad(scores: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let q = numeric::softmax(scores)?;
    if target >= q.len() {
        return Err(Error::IndexOutOfRange(format!(
            "target {target} outside {} scores",
            q.len()
        )));
    }
    let qt = q[target];
    let grad = q
        .iter()
        .enumerate()
        .map(|(i, &qi)| {
            if i == target {
                qt * (1.0 - qt)
            } else {
                -qt * qi
            }
        })
        .collect();
    Ok((qt, grad))
}

/// Cross-entropy under softmax plus its gradient w.r.t. the scores:
/// `d(-ln q_t) / d s_i = q_i - δ_ti`.
pub fn softmax_ce_grad(scores: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    let q = numeric::softmax(scores)?;
    if target >= q.len() {
        return Err(Error::IndexOutOfRange(format!(
            "target {target} outside {} scores",
            q.len()
        )));
    }
    let loss = -q[target].max(numeric::PROB_FLOOR).ln();
    let grad = q
        .iter()
        .enumerate()
        .map(|(i, &qi)| if i == target { qi - 1.0 } else { qi })
        .collect();
    Ok((loss, grad))
}

/// Cosine similarity plus gradients w.r.t. both operands.
pub fn cosine_grad(u: &[f64], v: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let cos = numeric::cosine(u, v)?;
    let nu = numeric::norm(u);
    let nv = numeric::norm(v);
    let grad_u: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| vi / (nu * nv) - cos * ui / (nu * nu))
        .collect();
    let grad_v: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ui, &vi)| ui / (nu * nv) - cos * vi / (nv * nv))
        .collect();
    Ok((cos, grad_u, grad_v))
}

/// Scalar score of a dialog-act label set plus its gradient w.r.t. the
/// pre-sigmoid logits.
pub fn da_set_score_grad(scores: &[f64], bits: &[bool]) -> (f64, Vec<f64>) {
    let positives = bits.iter().filter(|&&b| b).count();
    let score = da_set_score(scores, bits);
    let grad = if positives == 0 {
        let n = scores.len() as f64;
        scores.iter().map(|&a| -a * (1.0 - a) / n).collect()
    } else {
        let p = positives as f64;
        scores
            .iter()
            .zip(bits)
            .map(|(&a, &b)| if b { a * (1.0 - a) / p } else { 0.0 })
            .collect()
    };
    (score, grad)
}

/// Mean binary cross-entropy of a dialog-act label set plus its gradient
/// w.r.t. the pre-sigmoid logits: `(a - t) / N`.
pub fn da_loss_grad(scores: &[f64], bits: &[bool]) -> Result<(f64, Vec<f64>)> {
    let loss = numeric::binary_cross_entropy(scores, bits)?;
    let n = scores.len() as f64;
    let grad = scores
        .iter()
        .zip(bits)
        .map(|(&a, &b)| (a - if b { 1.0 } else { 0.0 }) / n)
        .collect();
    Ok((loss, grad))
}

/// Builds a freshly initialized head for `task`.
pub fn init_head(
    seed: u64,
    task: crate::corpus::TaskKind,
    hidden_dim: usize,
    intent_classes: usize,
    da_intents: usize,
    value_tokens: Vec<Vec<Vec<usize>>>,
    candidate_tokens: Vec<Vec<usize>>,
) -> Result<Head> {
    use crate::corpus::TaskKind;
    let mut rng = StreamRng::new(seed).derive_str("head-init");
    let head = match task {
        TaskKind::Intent => {
            if intent_classes < 2 {
                return Err(Error::Config("intent head needs >= 2 classes".into()));
            }
            Head::Intent(IntentHead {
                weights: Mat64::from_fn(intent_classes, hidden_dim, |_, _| {
                    rng.uniform_in(-0.1, 0.1)
                }),
            })
        }
        TaskKind::DialogAct => {
            if da_intents == 0 {
                return Err(Error::Config("dialog-act head needs >= 1 intent".into()));
            }
            Head::DialogAct(DaHead {
                weights: Mat64::from_fn(da_intents, hidden_dim, |_, _| rng.uniform_in(-0.1, 0.1)),
            })
        }
        TaskKind::Dst => {
            if value_tokens.is_empty() {
                return Err(Error::Config("dst head needs (domain, slot) pairs".into()));
            }
            // Projections start near the identity so initial scores are
            // plain input/value cosines.
            let projections = value_tokens
                .iter()
                .map(|_| {
                    Mat64::from_fn(hidden_dim, hidden_dim, |r, c| {
                        let eye = if r == c { 1.0 } else { 0.0 };
                        eye + rng.uniform_in(-0.05, 0.05)
                    })
                })
                .collect();
            Head::Dst(DstHead {
                projections,
                value_tokens,
            })
        }
        TaskKind::ResponseSelection => {
            if candidate_tokens.len() <= EVAL_NEGATIVES {
                return Err(Error::Config(format!(
                    "candidate pool of {} must exceed {} evaluation negatives",
                    candidate_tokens.len(),
                    EVAL_NEGATIVES
                )));
            }
            Head::ResponseSelection(RsHead {
                candidate_tokens,
                train_negatives: TRAIN_NEGATIVES,
                eval_negatives: EVAL_NEGATIVES,
            })
        }
    };
    Ok(head)
}

/// Checks the label variant against the head.
pub fn label_fits_head(head: &Head, label: &LabelValue) -> bool {
    matches!(
        (head, label),
        (Head::Intent(_), LabelValue::SingleClass(_))
            | (Head::DialogAct(_), LabelValue::MultiLabel(_))
            | (Head::Dst(_), LabelValue::SlotAssignment(_))
            | (Head::ResponseSelection(_), LabelValue::ResponseRef(_))
    )
}
