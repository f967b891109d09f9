//! The encoder+head container: prediction with confidence scores, the
//! per-label scalar score differentiated for saliency, SGD training with
//! early stopping, and exact checkpoint round-trips.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Example, LabelValue, TaskKind, UNK};
use crate::encoder::{
    mean_grad_to_rows, EncodeCache, EncoderConfig, EncoderGrads, EncoderParams, InputEmbedding,
};
use crate::error::{Error, Result};
use crate::heads::{self, Head, HeadGrads};
use crate::metrics::{self, Ranking};
use crate::numeric::{Mat64, StreamRng};

/// Per-step cache of encoded ontology values: per pair, per value, the
/// hidden representation and its forward cache.
type ValueEncodings = Vec<Vec<(Vec<f64>, EncodeCache)>>;

/// A Teacher or Student instance: shared encoder plus one task head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskModel {
    pub task: TaskKind,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    pub encoder: EncoderParams,
    pub head: Head,
}

/// A prediction with its confidence score in [0, 1] and the per-dimension
/// scores it was decided from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: LabelValue,
    pub confidence: f64,
    pub scores: Vec<f64>,
}

/// Encoded ontology entries, computed once per model state and reused
/// across examples (slot values for dialog-state tracking, the candidate
/// pool for response selection).
#[derive(Debug, Clone, Default)]
pub struct OntologyEncodings {
    /// Per pair, per value, the value's hidden representation.
    pub dst_values: Vec<Vec<Vec<f64>>>,
    /// Per candidate, its hidden representation.
    pub rs_candidates: Vec<Vec<f64>>,
}

/// Context needed to evaluate the scalar prediction score for a label.
/// Response selection scores are normalized over an explicit pool of
/// candidate ids that must contain the labeled response.
pub struct ScoreContext<'a> {
    pub encodings: &'a OntologyEncodings,
    pub rs_pool: Option<&'a [usize]>,
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Hard cap on epochs; early stopping usually halts first.
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            batch_size: 32,
            max_epochs: 200,
        }
    }
}

/// Outcome of one early-stopped training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    /// Epoch of the returned checkpoint (0 = initialization).
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl TaskModel {
    /// Initializes a fresh model for the dataset's task. Identical seeds
    /// give identical parameters.
    pub fn init(seed: u64, dataset: &Dataset, config: &EncoderConfig) -> Result<Self> {
        let encoder = EncoderParams::init(seed, dataset.vocab.size(), config)?;
        let nonempty = |tokens: Vec<usize>| if tokens.is_empty() { vec![UNK] } else { tokens };
        let value_tokens: Vec<Vec<Vec<usize>>> = dataset
            .ontology
            .slots
            .iter()
            .map(|slot| {
                slot.values
                    .iter()
                    .map(|v| nonempty(dataset.encode_phrase(v)))
                    .collect()
            })
            .collect();
        let candidate_tokens: Vec<Vec<usize>> = dataset
            .ontology
            .responses
            .iter()
            .map(|r| nonempty(dataset.encode_phrase(r)))
            .collect();
        let head = heads::init_head(
            seed,
            dataset.task,
            config.hidden_dim,
            dataset.ontology.classes.len(),
            dataset.ontology.da_intents.len(),
            value_tokens,
            candidate_tokens,
        )?;
        Ok(Self {
            task: dataset.task,
            seed,
            encoder,
            head,
        })
    }

    /// Hidden representation of a token sequence (inference mode).
    pub fn hidden_of(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let input = self.encoder.embed(tokens)?;
        Ok(self.encoder.encode(&input, None))
    }

    /// Encodes the ontology entries the head scores against.
    pub fn encode_ontology(&self) -> Result<OntologyEncodings> {
        let mut encodings = OntologyEncodings::default();
        match &self.head {
            Head::Dst(head) => {
                for pair in &head.value_tokens {
                    let mut per_value = Vec::with_capacity(pair.len());
                    for tokens in pair {
                        per_value.push(self.hidden_of(tokens)?);
                    }
                    encodings.dst_values.push(per_value);
                }
            }
            Head::ResponseSelection(head) => {
                for tokens in &head.candidate_tokens {
                    encodings.rs_candidates.push(self.hidden_of(tokens)?);
                }
            }
            _ => {}
        }
        Ok(encodings)
    }

    /// Samples the evaluation candidate pool for a response-selection
    /// example: its fixed pool when present, otherwise `eval_negatives + 1`
    /// distinct candidates drawn from a stream keyed by the example id.
    pub fn rs_eval_pool(&self, example: &Example, eval_seed: u64) -> Result<Vec<usize>> {
        let Head::ResponseSelection(head) = &self.head else {
            return Err(Error::InvalidInput(
                "evaluation pool requested from a non-response-selection model".into(),
            ));
        };
        if let Some(pool) = &example.candidate_pool {
            return Ok(pool.clone());
        }
        let mut rng = StreamRng::new(eval_seed)
            .derive_str("rs-eval-pool")
            .derive_str(&example.id);
        Ok(rng.sample_distinct(head.candidate_tokens.len(), head.eval_negatives + 1))
    }

    /// Predicts a label with confidence for one example, reusing
    /// precomputed ontology encodings.
    pub fn predict_with(
        &self,
        encodings: &OntologyEncodings,
        example: &Example,
        eval_seed: u64,
    ) -> Result<Prediction> {
        let hidden = self.hidden_of(&example.tokens)?;
        match &self.head {
            Head::Intent(head) => {
                let probs = heads::intent_forward(head, &hidden)?;
                let (class, confidence) = heads::decide_intent(&probs);
                Ok(Prediction {
                    label: LabelValue::SingleClass(class),
                    confidence,
                    scores: probs,
                })
            }
            Head::DialogAct(head) => {
                let scores = heads::da_forward(head, &hidden)?;
                let (bits, confidence) = heads::decide_da(&scores);
                Ok(Prediction {
                    label: LabelValue::MultiLabel(bits),
                    confidence,
                    scores,
                })
            }
            Head::Dst(head) => {
                let mut per_pair = Vec::with_capacity(head.projections.len());
                for j in 0..head.projections.len() {
                    per_pair.push(heads::dst_score(
                        head,
                        &hidden,
                        j,
                        &encodings.dst_values[j],
                    )?);
                }
                let (assignment, confidence) = heads::decide_dst(&per_pair)?;
                // Diagnostics: the winning softmax probability per pair.
                let scores = per_pair
                    .iter()
                    .zip(&assignment)
                    .map(|(s, &v)| crate::numeric::softmax(s).map(|q| q[v]))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(Prediction {
                    label: LabelValue::SlotAssignment(assignment),
                    confidence,
                    scores,
                })
            }
            Head::ResponseSelection(_) => {
                let pool = self.rs_eval_pool(example, eval_seed)?;
                let scores = pool
                    .iter()
                    .map(|&c| heads::rs_score(&hidden, &encodings.rs_candidates[c]))
                    .collect::<Result<Vec<f64>>>()?;
                let (position, confidence) = heads::decide_rs(&scores)?;
                let probs = crate::numeric::softmax(&scores)?;
                Ok(Prediction {
                    label: LabelValue::ResponseRef(pool[position]),
                    confidence,
                    scores: probs,
                })
            }
        }
    }

    /// One-off prediction (builds the ontology encodings first).
    pub fn predict(&self, example: &Example, eval_seed: u64) -> Result<Prediction> {
        let encodings = self.encode_ontology()?;
        self.predict_with(&encodings, example, eval_seed)
    }

    /// Ranks the gold response against its evaluation pool, for recall@k.
    pub fn rs_rank_gold(
        &self,
        encodings: &OntologyEncodings,
        example: &Example,
        eval_seed: u64,
    ) -> Result<Ranking> {
        let Some(LabelValue::ResponseRef(gold)) = example.label else {
            return Err(Error::InvalidInput(format!(
                "example {} has no response label to rank",
                example.id
            )));
        };
        let Head::ResponseSelection(head) = &self.head else {
            return Err(Error::InvalidInput("not a response-selection model".into()));
        };
        let pool = match &example.candidate_pool {
            Some(pool) => {
                if !pool.contains(&gold) {
                    return Err(Error::Schema(format!(
                        "fixed pool of example {} omits its gold response",
                        example.id
                    )));
                }
                pool.clone()
            }
            None => {
                // Gold plus eval_negatives distinct non-gold candidates.
                let mut rng = StreamRng::new(eval_seed)
                    .derive_str("rs-eval-pool")
                    .derive_str(&example.id);
                let total = head.candidate_tokens.len();
                let mut pool = vec![gold];
                pool.extend(
                    rng.sample_distinct(total - 1, head.eval_negatives)
                        .into_iter()
                        .map(|i| if i >= gold { i + 1 } else { i }),
                );
                pool
            }
        };
        let hidden = self.hidden_of(&example.tokens)?;
        let scores = pool
            .iter()
            .map(|&c| heads::rs_score(&hidden, &encodings.rs_candidates[c]))
            .collect::<Result<Vec<f64>>>()?;
        let ordered = heads::rank_pool(&scores)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        Ok(Ranking {
            ordered_candidates: ordered,
            true_candidate: gold,
        })
    }

    /// The scalar prediction score for label `y` — the quantity whose
    /// gradient w.r.t. the token embedding matrix drives saliency:
    /// the softmax probability of the intent class; the mean score over a
    /// dialog-act label set; the mean softmax probability of the labeled
    /// slot values; or the softmax-normalized cosine of the labeled
    /// response over the given pool.
    pub fn scalar_score_for_label(
        &self,
        input: &InputEmbedding,
        label: &LabelValue,
        ctx: &ScoreContext,
    ) -> Result<f64> {
        Ok(self.score_internal(input, label, ctx, false)?.0)
    }

    /// The scalar score plus its exact gradient w.r.t. the n x d input
    /// embedding matrix.
    pub fn score_and_embedding_grad(
        &self,
        input: &InputEmbedding,
        label: &LabelValue,
        ctx: &ScoreContext,
    ) -> Result<(f64, Mat64)> {
        let (score, grad) = self.score_internal(input, label, ctx, true)?;
        Ok((score, grad.expect("gradient requested")))
    }

    /// Exact analytic gradient of the label's prediction score w.r.t. the
    /// per-input token embedding matrix.
    pub fn grad_wrt_token_embeddings(
        &self,
        input: &InputEmbedding,
        label: &LabelValue,
        ctx: &ScoreContext,
    ) -> Result<Mat64> {
        Ok(self.score_and_embedding_grad(input, label, ctx)?.1)
    }

    fn score_internal(
        &self,
        input: &InputEmbedding,
        label: &LabelValue,
        ctx: &ScoreContext,
        want_grad: bool,
    ) -> Result<(f64, Option<Mat64>)> {
        if !heads::label_fits_head(&self.head, label) {
            return Err(Error::InvalidInput(format!(
                "label kind {} does not fit task {}",
                label.kind_name(),
                self.task.name()
            )));
        }
        let (hidden, cache) = self.encoder.encode_cached(input, None);
        let (score, grad_hidden) = match (&self.head, label) {
            (Head::Intent(head), LabelValue::SingleClass(y)) => {
                let logits = head.weights.matvec(&hidden);
                let (score, grad_logits) = heads::softmax_prob_grad(&logits, *y)?;
                let grad_hidden = want_grad.then(|| head.weights.matvec_transposed(&grad_logits));
                (score, grad_hidden)
            }
            (Head::DialogAct(head), LabelValue::MultiLabel(bits)) => {
                if bits.len() != head.weights.rows() {
                    return Err(Error::ShapeMismatch(format!(
                        "label width {} vs {} dialog-act intents",
                        bits.len(),
                        head.weights.rows()
                    )));
                }
                let scores = heads::da_forward(head, &hidden)?;
                let (score, grad_logits) = heads::da_set_score_grad(&scores, bits);
                let grad_hidden = want_grad.then(|| head.weights.matvec_transposed(&grad_logits));
                (score, grad_hidden)
            }
            (Head::Dst(head), LabelValue::SlotAssignment(assignment)) => {
                if assignment.len() != head.projections.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "assignment over {} pairs vs {} projections",
                        assignment.len(),
                        head.projections.len()
                    )));
                }
                let pairs = head.projections.len() as f64;
                let mut score_sum = 0.0;
                let mut grad_hidden = want_grad.then(|| vec![0.0; hidden.len()]);
                for (j, &target) in assignment.iter().enumerate() {
                    let values = &ctx.encodings.dst_values[j];
                    let projected = head.projections[j].matvec(&hidden);
                    let mut scores = Vec::with_capacity(values.len());
                    let mut grads_u = Vec::with_capacity(values.len());
                    for value in values {
                        let (cos, grad_u, _) = heads::cosine_grad(&projected, value)?;
                        scores.push(cos);
                        grads_u.push(grad_u);
                    }
                    let (prob, grad_scores) = heads::softmax_prob_grad(&scores, target)?;
                    score_sum += prob;
                    if let Some(acc) = grad_hidden.as_mut() {
                        let mut grad_projected = vec![0.0; projected.len()];
                        for (gs, gu) in grad_scores.iter().zip(&grads_u) {
                            for (o, g) in grad_projected.iter_mut().zip(gu) {
                                *o += gs * g;
                            }
                        }
                        let back = head.projections[j].matvec_transposed(&grad_projected);
                        for (a, b) in acc.iter_mut().zip(&back) {
                            *a += b / pairs;
                        }
                    }
                }
                (score_sum / pairs, grad_hidden)
            }
            (Head::ResponseSelection(_), LabelValue::ResponseRef(y)) => {
                let pool = ctx.rs_pool.ok_or_else(|| {
                    Error::InvalidInput(
                        "response-selection score needs an explicit candidate pool".into(),
                    )
                })?;
                let target = pool.iter().position(|c| c == y).ok_or_else(|| {
                    Error::InvalidInput(format!("labeled response {y} absent from its pool"))
                })?;
                let mut scores = Vec::with_capacity(pool.len());
                let mut grads_u = Vec::with_capacity(pool.len());
                for &c in pool {
                    let (cos, grad_u, _) =
                        heads::cosine_grad(&hidden, &ctx.encodings.rs_candidates[c])?;
                    scores.push(cos);
                    grads_u.push(grad_u);
                }
                let (prob, grad_scores) = heads::softmax_prob_grad(&scores, target)?;
                let grad_hidden = want_grad.then(|| {
                    let mut acc = vec![0.0; hidden.len()];
                    for (gs, gu) in grad_scores.iter().zip(&grads_u) {
                        for (o, g) in acc.iter_mut().zip(gu) {
                            *o += gs * g;
                        }
                    }
                    acc
                });
                (prob, grad_hidden)
            }
            _ => unreachable!("label_fits_head checked above"),
        };
        if !score.is_finite() {
            return Err(Error::InvalidInput("non-finite prediction score".into()));
        }
        let grad = match grad_hidden {
            None => None,
            Some(gh) => {
                let (_, grad_mean) = self.encoder.backward_hidden(&cache, &gh);
                Some(mean_grad_to_rows(input.token_count(), &grad_mean))
            }
        };
        Ok((score, grad))
    }

    /// One SGD step over a batch: mean per-example loss, gradients through
    /// every branch (including slot-value and candidate encodings), and a
    /// single parameter update. A non-finite loss or gradient aborts the
    /// step with the parameters untouched.
    pub fn train_step(&mut self, batch: &[&Example], lr: f64, rng: &mut StreamRng) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
        }
        let mut enc_grads = EncoderGrads::zeros_like(&self.encoder);
        let mut head_grads = self.head.zero_grads();
        let mut total_loss = 0.0;

        // Slot-value encodings are fixed within the step; candidates are
        // encoded lazily since only sampled negatives are touched.
        let dst_values: Option<ValueEncodings> = match &self.head {
            Head::Dst(head) => {
                let mut pairs = Vec::with_capacity(head.value_tokens.len());
                for pair in &head.value_tokens {
                    let mut per_value = Vec::with_capacity(pair.len());
                    for tokens in pair {
                        let input = self.encoder.embed(tokens)?;
                        per_value.push(self.encoder.encode_cached(&input, None));
                    }
                    pairs.push(per_value);
                }
                Some(pairs)
            }
            _ => None,
        };
        let mut rs_cache: HashMap<usize, (Vec<f64>, EncodeCache)> = HashMap::new();

        for example in batch {
            let label = example.label.as_ref().ok_or_else(|| {
                Error::InvalidInput(format!(
                    "unlabeled example {} in training batch",
                    example.id
                ))
            })?;
            if !heads::label_fits_head(&self.head, label) {
                return Err(Error::InvalidInput(format!(
                    "label kind {} does not fit task {}",
                    label.kind_name(),
                    self.task.name()
                )));
            }
            let mask = self.encoder.sample_dropout_mask(rng);
            let input = self.encoder.embed(&example.tokens)?;
            let (hidden, cache) = self.encoder.encode_cached(&input, mask.as_deref());

            let (loss, grad_hidden) = match (&self.head, label) {
                (Head::Intent(head), LabelValue::SingleClass(y)) => {
                    let logits = head.weights.matvec(&hidden);
                    let (loss, grad_logits) = heads::softmax_ce_grad(&logits, *y)?;
                    let HeadGrads::Intent(gw) = &mut head_grads else {
                        unreachable!()
                    };
                    gw.add_outer_scaled(&grad_logits, &hidden, 1.0);
                    (loss, head.weights.matvec_transposed(&grad_logits))
                }
                (Head::DialogAct(head), LabelValue::MultiLabel(bits)) => {
                    let scores = heads::da_forward(head, &hidden)?;
                    let (loss, grad_logits) = heads::da_loss_grad(&scores, bits)?;
                    let HeadGrads::DialogAct(gw) = &mut head_grads else {
                        unreachable!()
                    };
                    gw.add_outer_scaled(&grad_logits, &hidden, 1.0);
                    (loss, head.weights.matvec_transposed(&grad_logits))
                }
                (Head::Dst(head), LabelValue::SlotAssignment(assignment)) => {
                    // Cross-entropy summed over the (domain, slot) pairs,
                    // with gradients flowing through both cosine branches.
                    let values = dst_values.as_ref().expect("dst encodings prepared");
                    let HeadGrads::Dst(gps) = &mut head_grads else {
                        unreachable!()
                    };
                    let mut loss = 0.0;
                    let mut grad_hidden = vec![0.0; hidden.len()];
                    for (j, &target) in assignment.iter().enumerate() {
                        let projected = head.projections[j].matvec(&hidden);
                        let per_value = &values[j];
                        let mut scores = Vec::with_capacity(per_value.len());
                        let mut grads_u = Vec::with_capacity(per_value.len());
                        let mut grads_v = Vec::with_capacity(per_value.len());
                        for (value_hidden, _) in per_value {
                            let (cos, gu, gv) = heads::cosine_grad(&projected, value_hidden)?;
                            scores.push(cos);
                            grads_u.push(gu);
                            grads_v.push(gv);
                        }
                        let (pair_loss, grad_scores) = heads::softmax_ce_grad(&scores, target)?;
                        loss += pair_loss;
                        let mut grad_projected = vec![0.0; projected.len()];
                        for (gs, gu) in grad_scores.iter().zip(&grads_u) {
                            for (o, g) in grad_projected.iter_mut().zip(gu) {
                                *o += gs * g;
                            }
                        }
                        gps[j].add_outer_scaled(&grad_projected, &hidden, 1.0);
                        let back = head.projections[j].matvec_transposed(&grad_projected);
                        for (a, b) in grad_hidden.iter_mut().zip(&back) {
                            *a += b;
                        }
                        // Value branch shares the encoder.
                        for (i, (gs, gv)) in grad_scores.iter().zip(&grads_v).enumerate() {
                            let grad_value: Vec<f64> = gv.iter().map(|g| gs * g).collect();
                            self.encoder.accumulate_grads(
                                &head.value_tokens[j][i],
                                &per_value[i].1,
                                &grad_value,
                                &mut enc_grads,
                            );
                        }
                    }
                    (loss, grad_hidden)
                }
                (Head::ResponseSelection(head), LabelValue::ResponseRef(y)) => {
                    // Rank the gold response against sampled negatives via
                    // cross-entropy over the cosine scores.
                    let total = head.candidate_tokens.len();
                    let negatives = head.train_negatives.min(total - 1);
                    let mut pool = vec![*y];
                    pool.extend(
                        rng.sample_distinct(total - 1, negatives)
                            .into_iter()
                            .map(|i| if i >= *y { i + 1 } else { i }),
                    );
                    for &c in &pool {
                        if let std::collections::hash_map::Entry::Vacant(slot) = rs_cache.entry(c) {
                            let input = self.encoder.embed(&head.candidate_tokens[c])?;
                            slot.insert(self.encoder.encode_cached(&input, None));
                        }
                    }
                    let mut scores = Vec::with_capacity(pool.len());
                    let mut grads_u = Vec::with_capacity(pool.len());
                    let mut grads_v = Vec::with_capacity(pool.len());
                    for &c in &pool {
                        let (cand_hidden, _) = &rs_cache[&c];
                        let (cos, gu, gv) = heads::cosine_grad(&hidden, cand_hidden)?;
                        scores.push(cos);
                        grads_u.push(gu);
                        grads_v.push(gv);
                    }
                    let (loss, grad_scores) = heads::softmax_ce_grad(&scores, 0)?;
                    let mut grad_hidden = vec![0.0; hidden.len()];
                    for (gs, gu) in grad_scores.iter().zip(&grads_u) {
                        for (o, g) in grad_hidden.iter_mut().zip(gu) {
                            *o += gs * g;
                        }
                    }
                    for ((&c, gs), gv) in pool.iter().zip(&grad_scores).zip(&grads_v) {
                        let grad_candidate: Vec<f64> = gv.iter().map(|g| gs * g).collect();
                        let (_, cand_cache) = &rs_cache[&c];
                        self.encoder.accumulate_grads(
                            &head.candidate_tokens[c],
                            cand_cache,
                            &grad_candidate,
                            &mut enc_grads,
                        );
                    }
                    (loss, grad_hidden)
                }
                _ => unreachable!("label_fits_head checked above"),
            };
            total_loss += loss;
            self.encoder
                .accumulate_grads(&example.tokens, &cache, &grad_hidden, &mut enc_grads);
        }

        let mean_loss = total_loss / batch.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "mean loss {mean_loss} over a batch of {} ({} task)",
                batch.len(),
                self.task.name()
            )));
        }
        if !(enc_grads.embedding.is_finite()
            && enc_grads.hidden.is_finite()
            && enc_grads.bias.iter().all(|g| g.is_finite()))
        {
            return Err(Error::Diverged(
                "non-finite encoder gradient; step aborted".into(),
            ));
        }
        let step = lr / batch.len() as f64;
        self.encoder.apply_grads(&enc_grads, step);
        self.head.apply_grads(&head_grads, step);
        Ok(mean_loss)
    }

    /// Task metric on labeled examples: intent accuracy, dialog-act
    /// micro-F1, joint goal accuracy, or recall@1. Higher is better.
    pub fn validation_score(&self, examples: &[Example], eval_seed: u64) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::InvalidInput("validation over no examples".into()));
        }
        let encodings = self.encode_ontology()?;
        match self.task {
            TaskKind::Intent => {
                let mut preds = Vec::with_capacity(examples.len());
                let mut gold = Vec::with_capacity(examples.len());
                for e in examples {
                    let Some(LabelValue::SingleClass(g)) = e.label else {
                        return Err(Error::InvalidInput(format!("example {} unlabeled", e.id)));
                    };
                    let p = self.predict_with(&encodings, e, eval_seed)?;
                    let LabelValue::SingleClass(c) = p.label else {
                        unreachable!()
                    };
                    preds.push(c);
                    gold.push(g);
                }
                metrics::accuracy(&preds, &gold)
            }
            TaskKind::DialogAct => {
                let mut preds = Vec::new();
                let mut gold = Vec::new();
                for e in examples {
                    let Some(LabelValue::MultiLabel(g)) = &e.label else {
                        return Err(Error::InvalidInput(format!("example {} unlabeled", e.id)));
                    };
                    let p = self.predict_with(&encodings, e, eval_seed)?;
                    let LabelValue::MultiLabel(bits) = p.label else {
                        unreachable!()
                    };
                    preds.push(bits);
                    gold.push(g.clone());
                }
                let n = gold[0].len();
                Ok(metrics::metric_f1(&preds, &gold, n)?.micro_f1)
            }
            TaskKind::Dst => {
                let mut preds = Vec::new();
                let mut gold = Vec::new();
                for e in examples {
                    let Some(LabelValue::SlotAssignment(g)) = &e.label else {
                        return Err(Error::InvalidInput(format!("example {} unlabeled", e.id)));
                    };
                    let p = self.predict_with(&encodings, e, eval_seed)?;
                    let LabelValue::SlotAssignment(a) = p.label else {
                        unreachable!()
                    };
                    preds.push(a);
                    gold.push(g.clone());
                }
                Ok(metrics::metric_dst(&preds, &gold)?.joint_acc)
            }
            TaskKind::ResponseSelection => {
                let mut rankings = Vec::with_capacity(examples.len());
                for e in examples {
                    rankings.push(self.rs_rank_gold(&encodings, e, eval_seed)?);
                }
                metrics::metric_recall_at_k(&rankings, 1)
            }
        }
    }
}

/// Trains with early stopping: halts once the validation metric has not
/// improved for `patience` epochs (or at the epoch cap) and restores the
/// best-epoch checkpoint. The pre-training state counts as epoch 0.
pub fn fit_early_stop(
    model: &mut TaskModel,
    train: &[Example],
    validation: &[Example],
    config: &TrainConfig,
    patience: usize,
    seed: u64,
) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    if validation.is_empty() {
        return Err(Error::InvalidInput(
            "early stopping needs a validation split".into(),
        ));
    }
    let rng_root = StreamRng::new(seed).derive_str("fit");
    let mut best = model.clone();
    let mut best_metric = model.validation_score(validation, seed)?;
    let mut best_epoch = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        let mut rng = rng_root.derive(epoch as u64);
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            model.train_step(&batch, config.learning_rate, &mut rng)?;
        }
        epochs_run = epoch;
        let metric = model.validation_score(validation, seed)?;
        if metric > best_metric {
            best_metric = metric;
            best_epoch = epoch;
            best = model.clone();
        }
        if epoch - best_epoch >= patience {
            break;
        }
    }
    *model = best;
    Ok(FitReport {
        epochs_run,
        best_epoch,
        best_metric,
    })
}

/// On-disk checkpoint envelope shared by task models and the masked-token
/// model. JSON float round-trips are exact, so load(save(m)) == m.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    TaskModel(Box<TaskModel>),
    MaskedTokenModel(Box<crate::mlm::MlmModel>),
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let text = serde_json::to_string(checkpoint)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
