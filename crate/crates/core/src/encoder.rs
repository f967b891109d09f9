//! Desk-scale text encoder: token embedding lookup, mean pooling, one
//! tanh layer. Small enough that every gradient is hand-derived and
//! checkable against the finite-difference oracle, including gradients of
//! task scores with respect to the per-input token embedding matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Mat64, StreamRng};

/// Encoder hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Inverted-dropout rate applied to the hidden representation during
    /// training. 0 disables dropout.
    pub dropout_rate: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden_dim: 32,
            dropout_rate: 0.1,
        }
    }
}

/// Encoder parameters: embedding table, hidden layer, bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// V x d token embedding table.
    pub embedding: Mat64,
    /// l x d hidden layer.
    pub hidden: Mat64,
    /// Length-l bias.
    pub bias: Vec<f64>,
    pub dropout_rate: f64,
}

/// Per-input token embedding matrix (n x d). Rows are copies of the
/// embedding table, so they can be perturbed without touching the table.
#[derive(Debug, Clone, PartialEq)]
pub struct InputEmbedding {
    pub matrix: Mat64,
}

impl InputEmbedding {
    pub fn token_count(&self) -> usize {
        self.matrix.rows()
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct EncodeCache {
    /// Mean of the input embedding rows.
    pub mean: Vec<f64>,
    /// tanh output before dropout.
    pub hidden_raw: Vec<f64>,
    /// Per-unit multiplier applied by dropout (absent without a mask).
    pub drop_multiplier: Option<Vec<f64>>,
}

/// Gradient accumulator matching [`EncoderParams`] shapes.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub embedding: Mat64,
    pub hidden: Mat64,
    pub bias: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            embedding: Mat64::zeros(params.embedding.rows(), params.embedding.cols()),
            hidden: Mat64::zeros(params.hidden.rows(), params.hidden.cols()),
            bias: vec![0.0; params.bias.len()],
        }
    }
}

impl EncoderParams {
    /// Fresh parameters. Embeddings are uniform in [-0.5, 0.5]; the hidden
    /// layer uses a Xavier-style range. Identical seeds give identical
    /// parameters.
    pub fn init(seed: u64, vocab_size: usize, config: &EncoderConfig) -> Result<Self> {
        if config.embed_dim < 2 || config.hidden_dim < 2 {
            return Err(Error::Config("encoder dims must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&config.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate {} outside [0, 1)",
                config.dropout_rate
            )));
        }
        let mut rng = StreamRng::new(seed).derive_str("encoder-init");
        let d = config.embed_dim;
        let l = config.hidden_dim;
        let embedding = Mat64::from_fn(vocab_size, d, |_, _| rng.uniform_in(-0.5, 0.5));
        let bound = (6.0 / (d + l) as f64).sqrt();
        let hidden = Mat64::from_fn(l, d, |_, _| rng.uniform_in(-bound, bound));
        Ok(Self {
            embedding,
            hidden,
            bias: vec![0.0; l],
            dropout_rate: config.dropout_rate,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    /// Copies the embedding rows for `tokens` into an n x d matrix.
    pub fn embed(&self, tokens: &[usize]) -> Result<InputEmbedding> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("cannot embed an empty input".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::IndexOutOfRange(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let d = self.embed_dim();
        let mut matrix = Mat64::zeros(tokens.len(), d);
        for (r, &t) in tokens.iter().enumerate() {
            matrix.row_mut(r).copy_from_slice(self.embedding.row(t));
        }
        Ok(InputEmbedding { matrix })
    }

    /// Hidden representation `tanh(W_h * mean_rows(X) + b_h)`, with
    /// inverted dropout applied when a mask is supplied. The dropout
    /// multiplier renormalizes by the kept count, so an all-ones mask is
    /// the identity.
    pub fn encode(&self, input: &InputEmbedding, dropout_mask: Option<&[bool]>) -> Vec<f64> {
        self.encode_cached(input, dropout_mask).0
    }

    /// As [`encode`](Self::encode), also returning the forward cache.
    pub fn encode_cached(
        &self,
        input: &InputEmbedding,
        dropout_mask: Option<&[bool]>,
    ) -> (Vec<f64>, EncodeCache) {
        let mean = input.matrix.mean_rows();
        let mut pre = self.hidden.matvec(&mean);
        for (p, b) in pre.iter_mut().zip(&self.bias) {
            *p += b;
        }
        let hidden_raw: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        let (out, drop_multiplier) = match dropout_mask {
            None => (hidden_raw.clone(), None),
            Some(mask) => {
                debug_assert_eq!(mask.len(), hidden_raw.len());
                let kept = mask.iter().filter(|&&m| m).count();
                let scale = if kept == 0 {
                    0.0
                } else {
                    mask.len() as f64 / kept as f64
                };
                let multiplier: Vec<f64> =
                    mask.iter().map(|&m| if m { scale } else { 0.0 }).collect();
                let out = hidden_raw
                    .iter()
                    .zip(&multiplier)
                    .map(|(h, m)| h * m)
                    .collect();
                (out, Some(multiplier))
            }
        };
        (
            out,
            EncodeCache {
                mean,
                hidden_raw,
                drop_multiplier,
            },
        )
    }

    /// Samples a Bernoulli(1 - dropout_rate) keep mask for one example.
    pub fn sample_dropout_mask(&self, rng: &mut StreamRng) -> Option<Vec<bool>> {
        if self.dropout_rate == 0.0 {
            return None;
        }
        Some(
            (0..self.hidden_dim())
                .map(|_| rng.uniform() >= self.dropout_rate)
                .collect(),
        )
    }

    /// Backpropagates a gradient at the encoder output down to the mean
    /// embedding, returning `(grad_pre_activation, grad_mean)`.
    ///
    /// `grad_pre_activation` feeds the hidden-layer and bias updates;
    /// `grad_mean / n` is the gradient of every input embedding row.
    pub fn backward_hidden(&self, cache: &EncodeCache, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let grad_raw: Vec<f64> = match &cache.drop_multiplier {
            None => grad_out.to_vec(),
            Some(mult) => grad_out.iter().zip(mult).map(|(g, m)| g * m).collect(),
        };
        let grad_pre: Vec<f64> = grad_raw
            .iter()
            .zip(&cache.hidden_raw)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let grad_mean = self.hidden.matvec_transposed(&grad_pre);
        (grad_pre, grad_mean)
    }

    /// Accumulates parameter gradients for one example into `grads`, given
    /// the gradient at the encoder output. Returns `grad_mean` for callers
    /// that also need embedding-matrix gradients.
    pub fn accumulate_grads(
        &self,
        tokens: &[usize],
        cache: &EncodeCache,
        grad_out: &[f64],
        grads: &mut EncoderGrads,
    ) -> Vec<f64> {
        let (grad_pre, grad_mean) = self.backward_hidden(cache, grad_out);
        grads.hidden.add_outer_scaled(&grad_pre, &cache.mean, 1.0);
        for (b, g) in grads.bias.iter_mut().zip(&grad_pre) {
            *b += g;
        }
        let inv_n = 1.0 / tokens.len() as f64;
        for &t in tokens {
            for (e, g) in grads.embedding.row_mut(t).iter_mut().zip(&grad_mean) {
                *e += g * inv_n;
            }
        }
        grad_mean
    }

    /// Applies one SGD step: `params -= lr * grads`.
    pub fn apply_grads(&mut self, grads: &EncoderGrads, lr: f64) {
        self.embedding.add_scaled(&grads.embedding, -lr);
        self.hidden.add_scaled(&grads.hidden, -lr);
        for (b, g) in self.bias.iter_mut().zip(&grads.bias) {
            *b -= lr * g;
        }
    }
}

/// Expands a gradient w.r.t. the mean embedding into the full n x d
/// embedding-matrix gradient (every row receives `grad_mean / n`).
pub fn mean_grad_to_rows(n: usize, grad_mean: &[f64]) -> Mat64 {
    let inv_n = 1.0 / n as f64;
    Mat64::from_fn(n, grad_mean.len(), |_, c| grad_mean[c] * inv_n)
}
