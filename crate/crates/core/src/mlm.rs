//! Small trainable masked-token model: predicts a distribution over the
//! vocabulary for each `[mask]` position from the mean embedding of its
//! surrounding context window, and samples reconstructions from the top-K
//! of that distribution.
//!
//! The model is independent of the task encoder. It is trained once on all
//! train-split text (labels ignored) before self-training starts and is
//! frozen thereafter.

use serde::{Deserialize, Serialize};

use crate::corpus::{Vocab, MASK};
use crate::error::{Error, Result};
use crate::numeric::{self, Mat64, StreamRng};

/// Masked-token model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MlmConfig {
    pub embed_dim: usize,
    /// Context window radius around a masked position.
    pub window: usize,
    /// Fraction of maskable positions corrupted per training sequence.
    pub mask_ratio: f64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            window: 3,
            mask_ratio: 0.15,
            epochs: 20,
            learning_rate: 0.05,
        }
    }
}

/// Trained masked-token model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmModel {
    /// V x d context embedding table.
    pub embedding: Mat64,
    /// V x d output projection.
    pub output: Mat64,
    pub window: usize,
    /// Held-out cross-entropy after each training epoch.
    pub heldout_losses: Vec<f64>,
}

impl MlmModel {
    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    fn context_mean(&self, tokens: &[usize], position: usize) -> Vec<f64> {
        let lo = position.saturating_sub(self.window);
        let hi = (position + self.window).min(tokens.len().saturating_sub(1));
        let mut mean = vec![0.0; self.embedding.cols()];
        let mut count = 0usize;
        for (j, &t) in tokens.iter().enumerate().take(hi + 1).skip(lo) {
            if j == position || Vocab::is_reserved(t) {
                continue;
            }
            for (m, e) in mean.iter_mut().zip(self.embedding.row(t)) {
                *m += e;
            }
            count += 1;
        }
        if count > 0 {
            let inv = 1.0 / count as f64;
            for m in &mut mean {
                *m *= inv;
            }
        }
        mean
    }

    fn position_distribution(&self, tokens: &[usize], position: usize) -> Result<Vec<f64>> {
        let context = self.context_mean(tokens, position);
        let logits = self.output.matvec(&context);
        let mut probs = numeric::softmax(&logits)?;
        // Reserved tokens are never predicted.
        for p in probs.iter_mut().take(Vocab::reserved_count()) {
            *p = 0.0;
        }
        let total: f64 = probs.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidInput(
                "masked-token distribution has no mass outside reserved tokens".into(),
            ));
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(probs)
    }
}

/// Distribution over the vocabulary for each masked position. Every
/// position in `positions` must hold `[mask]`; each returned distribution
/// sums to 1 with reserved tokens at probability 0.
pub fn mlm_predict(
    model: &MlmModel,
    tokens: &[usize],
    positions: &[usize],
) -> Result<Vec<Vec<f64>>> {
    if positions.is_empty() {
        return Err(Error::InvalidInput("no masked positions to predict".into()));
    }
    for &p in positions {
        if p >= tokens.len() {
            return Err(Error::IndexOutOfRange(format!(
                "masked position {p} outside sequence of {}",
                tokens.len()
            )));
        }
        if tokens[p] != MASK {
            return Err(Error::InvalidInput(format!(
                "position {p} does not hold [mask]"
            )));
        }
    }
    positions
        .iter()
        .map(|&p| model.position_distribution(tokens, p))
        .collect()
}

/// Replaces each `[mask]` with one token sampled from the top-`k` of its
/// predicted distribution, proportional to the renormalized probabilities.
/// Unmasked positions pass through unchanged.
pub fn mlm_sample_reconstruction(
    model: &MlmModel,
    tokens: &[usize],
    positions: &[usize],
    k: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let distributions = mlm_predict(model, tokens, positions)?;
    let effective_vocab = model.vocab_size() - Vocab::reserved_count();
    let k = if k > effective_vocab {
        log::warn!("top-{k} clipped to the {effective_vocab} predictable tokens");
        effective_vocab
    } else {
        k
    };
    if k == 0 {
        return Err(Error::InvalidInput("top-k of zero tokens".into()));
    }
    let mut out = tokens.to_vec();
    for (&position, probs) in positions.iter().zip(&distributions) {
        // Top-k ids by probability, ties toward the lower id.
        let mut ids: Vec<usize> = (0..probs.len()).collect();
        ids.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        ids.truncate(k);
        let total: f64 = ids.iter().map(|&i| probs[i]).sum();
        let mut draw = rng.uniform() * total;
        let mut chosen = ids[ids.len() - 1];
        for &i in &ids {
            draw -= probs[i];
            if draw <= 0.0 {
                chosen = i;
                break;
            }
        }
        out[position] = chosen;
    }
    Ok(out)
}

fn maskable_positions(tokens: &[usize]) -> Vec<usize> {
    (0..tokens.len())
        .filter(|&i| !Vocab::is_reserved(tokens[i]))
        .collect()
}

/// Number of positions to corrupt: `max(1, round(ratio * n))`.
fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).round() as usize).max(1).min(n)
}

fn masked_loss(model: &MlmModel, tokens: &[usize], positions: &[usize]) -> Result<f64> {
    let mut corrupted = tokens.to_vec();
    for &p in positions {
        corrupted[p] = MASK;
    }
    let mut loss = 0.0;
    for &p in positions {
        let probs = model.position_distribution(&corrupted, p)?;
        loss += numeric::cross_entropy(&probs, tokens[p])?;
    }
    Ok(loss / positions.len() as f64)
}

/// Trains the masked-token model by SGD on cross-entropy of predicting
/// each masked token from its context window. 10% of the sequences are
/// held out; their loss after each epoch is recorded on the model.
pub fn mlm_train(
    sequences: &[Vec<usize>],
    vocab_size: usize,
    config: &MlmConfig,
    seed: u64,
) -> Result<MlmModel> {
    if sequences.is_empty() {
        return Err(Error::InvalidInput("masked-token corpus is empty".into()));
    }
    if vocab_size <= Vocab::reserved_count() {
        return Err(Error::InvalidInput(
            "vocabulary holds only reserved tokens".into(),
        ));
    }
    if !(config.mask_ratio > 0.0 && config.mask_ratio < 1.0) {
        return Err(Error::Config(format!(
            "mask ratio {} outside (0, 1)",
            config.mask_ratio
        )));
    }
    let root = StreamRng::new(seed).derive_str("mlm");
    let mut init_rng = root.derive(0);
    let scale = 1.0 / (config.embed_dim as f64).sqrt();
    let mut model = MlmModel {
        embedding: Mat64::from_fn(vocab_size, config.embed_dim, |_, _| {
            init_rng.uniform_in(-scale, scale)
        }),
        output: Mat64::from_fn(vocab_size, config.embed_dim, |_, _| {
            init_rng.uniform_in(-scale, scale)
        }),
        window: config.window,
        heldout_losses: Vec::new(),
    };

    // Deterministic 90/10 train/held-out split over sequence indices.
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    root.derive(1).shuffle(&mut order);
    let heldout_count = sequences.len() / 10;
    let (heldout_idx, train_idx) = order.split_at(heldout_count);

    // Fixed held-out maskings so epoch losses are comparable.
    let mut heldout_masks: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut heldout_rng = root.derive(2);
    for &i in heldout_idx {
        let maskable = maskable_positions(&sequences[i]);
        if maskable.is_empty() {
            continue;
        }
        let k = mask_count(maskable.len(), config.mask_ratio);
        let picks = heldout_rng.sample_distinct(maskable.len(), k);
        heldout_masks.push((i, picks.into_iter().map(|p| maskable[p]).collect()));
    }

    for epoch in 0..config.epochs {
        let mut rng = root.derive(100 + epoch as u64);
        let mut epoch_order = train_idx.to_vec();
        rng.shuffle(&mut epoch_order);
        for &i in &epoch_order {
            let tokens = &sequences[i];
            let maskable = maskable_positions(tokens);
            if maskable.is_empty() {
                continue;
            }
            let k = mask_count(maskable.len(), config.mask_ratio);
            let picks = rng.sample_distinct(maskable.len(), k);
            let positions: Vec<usize> = picks.into_iter().map(|p| maskable[p]).collect();
            let mut corrupted = tokens.clone();
            for &p in &positions {
                corrupted[p] = MASK;
            }
            for &p in &positions {
                train_position(&mut model, &corrupted, p, tokens[p], config.learning_rate);
            }
        }
        let mut heldout_loss = 0.0;
        let mut counted = 0usize;
        for (i, positions) in &heldout_masks {
            heldout_loss += masked_loss(&model, &sequences[*i], positions)?;
            counted += 1;
        }
        if counted > 0 {
            model.heldout_losses.push(heldout_loss / counted as f64);
        }
    }
    Ok(model)
}

/// One SGD update for a single masked position.
fn train_position(
    model: &mut MlmModel,
    corrupted: &[usize],
    position: usize,
    target: usize,
    lr: f64,
) {
    let context = model.context_mean(corrupted, position);
    let logits = model.output.matvec(&context);
    let probs = match numeric::softmax(&logits) {
        Ok(p) => p,
        Err(_) => return,
    };
    // d(-ln p_t)/d logits = p - onehot(t).
    let mut grad_logits = probs;
    grad_logits[target] -= 1.0;

    let grad_context = model.output.matvec_transposed(&grad_logits);
    model.output.add_outer_scaled(&grad_logits, &context, -lr);

    // Context tokens share the mean's gradient.
    let lo = position.saturating_sub(model.window);
    let hi = (position + model.window).min(corrupted.len() - 1);
    let contributors: Vec<usize> = (lo..=hi)
        .filter(|&j| j != position && !Vocab::is_reserved(corrupted[j]))
        .map(|j| corrupted[j])
        .collect();
    if contributors.is_empty() {
        return;
    }
    let scale = -lr / contributors.len() as f64;
    for t in contributors {
        for (e, g) in model.embedding.row_mut(t).iter_mut().zip(&grad_context) {
            *e += scale * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Corpus where every sentence repeats one word, so any masked token
    /// is determined by its neighbors. 150 word types, ids after the
    /// reserved block.
    fn repeated_word_corpus(seed: u64) -> (Vec<Vec<usize>>, usize) {
        let words = 150usize;
        let vocab_size = Vocab::reserved_count() + words;
        let mut rng = StreamRng::new(seed);
        let sequences = (0..600)
            .map(|_| {
                let w = Vocab::reserved_count() + rng.below(words);
                vec![w; 6 + rng.below(5)]
            })
            .collect();
        (sequences, vocab_size)
    }

    fn trained_model() -> (MlmModel, Vec<Vec<usize>>) {
        let (sequences, vocab_size) = repeated_word_corpus(5);
        let model = mlm_train(&sequences, vocab_size, &MlmConfig::default(), 42).unwrap();
        (model, sequences)
    }

    #[test]
    fn heldout_loss_decreases_and_top1_reconstruction_is_high() {
        let (model, sequences) = trained_model();
        let losses = &model.heldout_losses;
        assert!(losses.len() >= 2);
        assert!(
            losses[losses.len() - 1] < losses[0],
            "held-out loss did not decrease: {losses:?}"
        );

        // Generating-rule oracle: a masked token must be its neighbors'
        // word. Mask one position per sequence and check top-1.
        let mut hits = 0usize;
        let mut total = 0usize;
        for (i, tokens) in sequences.iter().take(200).enumerate() {
            let position = i % tokens.len();
            let mut corrupted = tokens.clone();
            corrupted[position] = MASK;
            let probs = &mlm_predict(&model, &corrupted, &[position]).unwrap()[0];
            let top = crate::heads::argmax(probs);
            total += 1;
            if top == tokens[position] {
                hits += 1;
            }
        }
        let rate = hits as f64 / total as f64;
        assert!(rate >= 0.9, "top-1 reconstruction rate {rate}");
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (sequences, vocab_size) = repeated_word_corpus(5);
        let cfg = MlmConfig {
            epochs: 0,
            ..MlmConfig::default()
        };
        let model = mlm_train(&sequences, vocab_size, &cfg, 42).unwrap();
        assert!(model.heldout_losses.is_empty());
        // Near-uniform predictions at initialization.
        let mut corrupted = sequences[0].clone();
        corrupted[0] = MASK;
        let probs = &mlm_predict(&model, &corrupted, &[0]).unwrap()[0];
        let uniform = 1.0 / (vocab_size - Vocab::reserved_count()) as f64;
        for &p in &probs[Vocab::reserved_count()..] {
            assert!(p < 20.0 * uniform);
        }
    }

    #[test]
    fn same_seed_identical_model() {
        let (sequences, vocab_size) = repeated_word_corpus(5);
        let cfg = MlmConfig {
            epochs: 2,
            ..MlmConfig::default()
        };
        let a = mlm_train(&sequences, vocab_size, &cfg, 9).unwrap();
        let b = mlm_train(&sequences, vocab_size, &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_contracts() {
        let (model, sequences) = trained_model();
        let mut corrupted = sequences[0].clone();
        corrupted[1] = MASK;
        corrupted[3] = MASK;
        let dists = mlm_predict(&model, &corrupted, &[1, 3]).unwrap();
        for probs in &dists {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for &p in probs.iter().take(Vocab::reserved_count()) {
                assert_eq!(p, 0.0);
            }
        }
        // Positions must actually hold [mask]; the list must be non-empty.
        assert!(mlm_predict(&model, &corrupted, &[0]).is_err());
        assert!(mlm_predict(&model, &corrupted, &[]).is_err());
    }

    #[test]
    fn top_one_sampling_is_argmax_and_preserves_unmasked() {
        let (model, sequences) = trained_model();
        let tokens = &sequences[3];
        let mut corrupted = tokens.clone();
        corrupted[2] = MASK;
        let probs = &mlm_predict(&model, &corrupted, &[2]).unwrap()[0];
        let expected = crate::heads::argmax(probs);
        let mut rng = StreamRng::new(1);
        let out = mlm_sample_reconstruction(&model, &corrupted, &[2], 1, &mut rng).unwrap();
        assert_eq!(out.len(), corrupted.len());
        assert_eq!(out[2], expected);
        for (i, (&a, &b)) in out.iter().zip(&corrupted).enumerate() {
            if i != 2 {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn sampling_is_reproducible_per_stream() {
        let (model, sequences) = trained_model();
        let mut corrupted = sequences[0].clone();
        corrupted[0] = MASK;
        let mut r1 = StreamRng::new(4).derive_str("ex-1").derive(2);
        let mut r2 = StreamRng::new(4).derive_str("ex-1").derive(2);
        let a = mlm_sample_reconstruction(&model, &corrupted, &[0], 10, &mut r1).unwrap();
        let b = mlm_sample_reconstruction(&model, &corrupted, &[0], 10, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_never_emits_reserved_tokens() {
        let (model, sequences) = trained_model();
        let mut corrupted = sequences[1].clone();
        corrupted[0] = MASK;
        let mut rng = StreamRng::new(8);
        for _ in 0..200 {
            let out = mlm_sample_reconstruction(&model, &corrupted, &[0], 10, &mut rng).unwrap();
            assert!(!Vocab::is_reserved(out[0]));
        }
    }

    #[test]
    fn sampling_frequencies_track_renormalized_top_k() {
        let (model, sequences) = trained_model();
        let mut corrupted = sequences[2].clone();
        corrupted[1] = MASK;
        let probs = &mlm_predict(&model, &corrupted, &[1]).unwrap()[0];
        let mut ids: Vec<usize> = (0..probs.len()).collect();
        ids.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        ids.truncate(10);
        let total: f64 = ids.iter().map(|&i| probs[i]).sum();

        let draws = 30_000usize;
        let mut counts = std::collections::HashMap::new();
        let mut rng = StreamRng::new(77);
        for _ in 0..draws {
            let out = mlm_sample_reconstruction(&model, &corrupted, &[1], 10, &mut rng).unwrap();
            *counts.entry(out[1]).or_insert(0usize) += 1;
        }
        for &i in &ids {
            let expected = probs[i] / total;
            let observed = *counts.get(&i).unwrap_or(&0) as f64 / draws as f64;
            assert!(
                (observed - expected).abs() < 0.03,
                "token {i}: observed {observed}, expected {expected}"
            );
        }
    }
}
