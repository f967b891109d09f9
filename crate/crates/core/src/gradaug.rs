//! Gradient-guided masked augmentation.
//!
//! For each labeled example the Teacher's prediction score for the label
//! is differentiated w.r.t. the token embedding matrix; per-token saliency
//! is the row sum of that gradient. Saliency is optionally smoothed by
//! averaging over Gaussian perturbations of the embeddings. Tokens are
//! then masked with probability inversely related to their importance and
//! reconstructed with the masked-token model, yielding `q` label-preserving
//! paraphrases per example.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Text, Vocab};
use crate::encoder::InputEmbedding;
use crate::error::{Error, Result};
use crate::mlm::{mlm_sample_reconstruction, MlmModel};
use crate::model::{ScoreContext, TaskModel};
use crate::numeric::{gaussian_sample, Mat64, StreamRng};

/// Tokens drawn from the top-K of the reconstruction distribution.
pub const TOP_K_RECONSTRUCTION: usize = 10;

/// How the masking distribution is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskingMode {
    /// Smoothed saliency (the full method).
    SmoothSaliency,
    /// Raw single-pass saliency (the "no smoothing" ablation).
    VanillaSaliency,
    /// Uniform masking, ignoring saliency (random-masking baseline).
    Uniform,
}

/// Augmentation hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradAugConfig {
    /// Augmentations generated per labeled example.
    pub augmentations_per_input: usize,
    /// Flatness of the masking distribution (0 = uniform).
    pub beta: f64,
    /// Gaussian replicates averaged into the smooth saliency.
    pub noise_count: usize,
    /// Per-coordinate variance of the embedding noise.
    pub noise_variance: f64,
    /// Fraction of tokens masked per augmentation.
    pub mask_ratio: f64,
    /// Importance floor, relative to the largest |saliency|.
    pub importance_floor: f64,
    pub masking: MaskingMode,
}

impl Default for GradAugConfig {
    fn default() -> Self {
        Self {
            augmentations_per_input: 3,
            beta: 1.0,
            noise_count: 20,
            noise_variance: 1e-4,
            mask_ratio: 0.15,
            importance_floor: 1e-6,
            masking: MaskingMode::SmoothSaliency,
        }
    }
}

impl GradAugConfig {
    pub fn validate(&self) -> Result<()> {
        if self.augmentations_per_input == 0 {
            return Err(Error::Config(
                "need at least one augmentation per input".into(),
            ));
        }
        if self.noise_count == 0 {
            return Err(Error::Config("need at least one noise replicate".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if self.noise_variance < 0.0 {
            return Err(Error::Config(format!(
                "noise variance {} must be >= 0",
                self.noise_variance
            )));
        }
        Ok(())
    }
}

/// Per-token importance scores and the masking distribution derived from
/// them, for one input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyProfile {
    /// Single-pass saliency per token.
    pub raw: Vec<f64>,
    /// Noise-averaged saliency per token.
    pub smooth: Vec<f64>,
    /// Masking distribution: non-negative, sums to 1.
    pub masking_probability: Vec<f64>,
}

/// Anything that can differentiate a scalar prediction score w.r.t. an
/// n x d input embedding matrix. Implemented by labeled task models and by
/// the closed-form scorers the tests check against.
pub trait SaliencyScorer {
    fn grad_wrt_embeddings(&self, embeddings: &Mat64) -> Result<Mat64>;
}

/// A task model paired with the label whose score is differentiated.
pub struct ModelScorer<'a> {
    pub model: &'a TaskModel,
    pub label: &'a crate::corpus::LabelValue,
    pub ctx: ScoreContext<'a>,
}

impl SaliencyScorer for ModelScorer<'_> {
    fn grad_wrt_embeddings(&self, embeddings: &Mat64) -> Result<Mat64> {
        let input = InputEmbedding {
            matrix: embeddings.clone(),
        };
        self.model
            .grad_wrt_token_embeddings(&input, self.label, &self.ctx)
    }
}

/// Per-token saliency: the sum over the embedding dimensions of the score
/// gradient at each token's row.
pub fn saliency(scorer: &dyn SaliencyScorer, embeddings: &Mat64) -> Result<Vec<f64>> {
    let grad = scorer.grad_wrt_embeddings(embeddings)?;
    let out: Vec<f64> = (0..grad.rows()).map(|r| grad.row(r).iter().sum()).collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite saliency".into()));
    }
    Ok(out)
}

/// Saliency averaged over `noise_count` Gaussian perturbations of the
/// whole embedding matrix (one fresh noise matrix and one backward pass
/// per replicate). Zero variance short-circuits to the plain saliency:
/// every replicate would be identical.
pub fn smooth_saliency(
    scorer: &dyn SaliencyScorer,
    embeddings: &Mat64,
    config: &GradAugConfig,
    noise_rng: &StreamRng,
) -> Result<Vec<f64>> {
    if config.noise_variance == 0.0 {
        return saliency(scorer, embeddings);
    }
    let n = embeddings.rows();
    let d = embeddings.cols();
    let mut sum = vec![0.0; n];
    for replicate in 0..config.noise_count {
        let mut rng = noise_rng.derive(replicate as u64);
        let noise = gaussian_sample(&mut rng, n * d, config.noise_variance)?;
        let mut perturbed = embeddings.clone();
        for (x, z) in perturbed.as_mut_slice().iter_mut().zip(&noise) {
            *x += z;
        }
        let m = saliency(scorer, &perturbed)?;
        for (s, v) in sum.iter_mut().zip(&m) {
            *s += v;
        }
    }
    let inv = 1.0 / config.noise_count as f64;
    Ok(sum.into_iter().map(|s| s * inv).collect())
}

/// Masking distribution inversely related to token importance:
/// importance is `max(|smooth_i|, floor * max_k |smooth_k|)` and
/// `p_i ∝ importance_i^(-beta)`, normalized by the sum. An all-zero
/// saliency (or beta 0) yields the uniform distribution.
pub fn masking_probability(smooth: &[f64], beta: f64, importance_floor: f64) -> Vec<f64> {
    let n = smooth.len();
    debug_assert!(n > 0);
    let max_abs = smooth.iter().map(|x| x.abs()).fold(0.0f64, f64::max);
    if max_abs == 0.0 || beta == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    let floor = importance_floor * max_abs;
    let weights: Vec<f64> = smooth
        .iter()
        .map(|x| x.abs().max(floor).powf(-beta))
        .collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Masks `max(1, round(mask_ratio * n))` positions drawn by weighted
/// sampling *without replacement* proportional to `p` (sequential draw
/// and remove with renormalization; if the remaining mass is zero the
/// draw falls back to uniform over the remaining positions). Returns the
/// corrupted sequence and the masked positions in draw order.
pub fn mask_tokens(
    tokens: &[usize],
    p: &[f64],
    mask_ratio: f64,
    rng: &mut StreamRng,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot mask an empty sequence".into()));
    }
    if tokens.len() != p.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} tokens vs {} masking probabilities",
            tokens.len(),
            p.len()
        )));
    }
    let count = ((mask_ratio * tokens.len() as f64).round() as usize)
        .max(1)
        .min(tokens.len());
    let mut remaining: Vec<usize> = (0..tokens.len()).collect();
    let mut weights: Vec<f64> = p.to_vec();
    let mut positions = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = remaining.iter().map(|&i| weights[i]).sum();
        let pick = if total > 0.0 {
            let mut draw = rng.uniform() * total;
            let mut chosen = remaining.len() - 1;
            for (slot, &i) in remaining.iter().enumerate() {
                draw -= weights[i];
                if draw <= 0.0 {
                    chosen = slot;
                    break;
                }
            }
            chosen
        } else {
            rng.below(remaining.len())
        };
        let position = remaining.swap_remove(pick);
        weights[position] = 0.0;
        positions.push(position);
    }
    let mut corrupted = tokens.to_vec();
    for &p in &positions {
        corrupted[p] = crate::corpus::MASK;
    }
    Ok((corrupted, positions))
}

/// Audit record for one generated augmentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugRecord {
    pub source_id: String,
    pub augmentation_index: usize,
    pub masked_positions: Vec<usize>,
    /// Replacement tokens, in position order.
    pub replacements: Vec<String>,
    pub saliency: SaliencyProfile,
}

/// Result of augmenting a labeled pool.
#[derive(Debug, Clone)]
pub struct AugmentationOutcome {
    /// The originals (bit-identical, in order) followed by the generated
    /// augmentations.
    pub augmented: Vec<Example>,
    pub records: Vec<AugRecord>,
    /// Per-example failures (id, message); a failing example contributes
    /// only its original.
    pub failures: Vec<(String, String)>,
}

fn profile_for_example(
    teacher: &TaskModel,
    encodings: &crate::model::OntologyEncodings,
    example: &Example,
    config: &GradAugConfig,
    example_rng: &StreamRng,
) -> Result<SaliencyProfile> {
    let label = example
        .label
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("unlabeled example in augmentation pool".into()))?;
    let n = example.tokens.len();
    if config.masking == MaskingMode::Uniform {
        let zeros = vec![0.0; n];
        let p = masking_probability(&zeros, config.beta, config.importance_floor);
        return Ok(SaliencyProfile {
            raw: zeros.clone(),
            smooth: zeros,
            masking_probability: p,
        });
    }
    let pool;
    let rs_pool = match label {
        crate::corpus::LabelValue::ResponseRef(y) => {
            let crate::heads::Head::ResponseSelection(head) = &teacher.head else {
                return Err(Error::InvalidInput("response label on non-rs model".into()));
            };
            let total = head.candidate_tokens.len();
            let negatives = head.train_negatives.min(total - 1);
            let mut rng = example_rng.derive_str("score-pool");
            let mut ids = vec![*y];
            ids.extend(
                rng.sample_distinct(total - 1, negatives)
                    .into_iter()
                    .map(|i| if i >= *y { i + 1 } else { i }),
            );
            pool = ids;
            Some(pool.as_slice())
        }
        _ => None,
    };
    let scorer = ModelScorer {
        model: teacher,
        label,
        ctx: ScoreContext { encodings, rs_pool },
    };
    let input = teacher.encoder.embed(&example.tokens)?;
    let raw = saliency(&scorer, &input.matrix)?;
    let smooth = match config.masking {
        MaskingMode::VanillaSaliency => raw.clone(),
        _ => smooth_saliency(
            &scorer,
            &input.matrix,
            config,
            &example_rng.derive_str("noise"),
        )?,
    };
    let mut p = masking_probability(&smooth, config.beta, config.importance_floor);
    // Reserved positions (turn separators and such) are never masked.
    let mut reserved_mass = 0.0;
    for (i, &t) in example.tokens.iter().enumerate() {
        if Vocab::is_reserved(t) {
            reserved_mass += p[i];
            p[i] = 0.0;
        }
    }
    if reserved_mass >= 1.0 {
        return Err(Error::DegenerateInput(
            "every position is a reserved token".into(),
        ));
    }
    if reserved_mass > 0.0 {
        let scale = 1.0 / (1.0 - reserved_mass);
        for v in &mut p {
            *v *= scale;
        }
    }
    Ok(SaliencyProfile {
        raw,
        smooth,
        masking_probability: p,
    })
}

/// Per-example augmentation output: the generated examples and records,
/// or the failing example's (id, message).
type ExampleOutcome = std::result::Result<(Vec<Example>, Vec<AugRecord>), (String, String)>;

fn augment_example(
    teacher: &TaskModel,
    encodings: &crate::model::OntologyEncodings,
    mlm: &MlmModel,
    vocab: &Vocab,
    example: &Example,
    config: &GradAugConfig,
    root: &StreamRng,
) -> Result<(Vec<Example>, Vec<AugRecord>)> {
    let example_rng = root.derive_str(&example.id);
    let profile = profile_for_example(teacher, encodings, example, config, &example_rng)?;
    let mut augmented = Vec::with_capacity(config.augmentations_per_input);
    let mut records = Vec::with_capacity(config.augmentations_per_input);
    for aug in 0..config.augmentations_per_input {
        let mut mask_rng = example_rng.derive_str("mask").derive(aug as u64);
        let (corrupted, positions) = mask_tokens(
            &example.tokens,
            &profile.masking_probability,
            config.mask_ratio,
            &mut mask_rng,
        )?;
        let mut recon_rng = example_rng.derive_str("reconstruct").derive(aug as u64);
        let reconstructed = mlm_sample_reconstruction(
            mlm,
            &corrupted,
            &positions,
            TOP_K_RECONSTRUCTION,
            &mut recon_rng,
        )?;
        let text = Text::Utterance(
            reconstructed
                .iter()
                .map(|&t| vocab.token(t))
                .collect::<Vec<_>>()
                .join(" "),
        );
        records.push(AugRecord {
            source_id: example.id.clone(),
            augmentation_index: aug,
            masked_positions: positions.clone(),
            replacements: positions
                .iter()
                .map(|&p| vocab.token(reconstructed[p]).to_string())
                .collect(),
            saliency: profile.clone(),
        });
        augmented.push(Example {
            id: format!("{}::aug{aug}", example.id),
            text,
            tokens: reconstructed,
            label: example.label.clone(),
            candidate_pool: example.candidate_pool.clone(),
        });
    }
    Ok((augmented, records))
}

/// Augments a labeled pool: the output contains every original example
/// (bit-identical) plus `q` reconstructions per example carrying the
/// source's label record unchanged. The masking distribution is computed
/// from the supplied (current) teacher, so it tracks the teacher across
/// self-training iterations. Per-example failures are collected, not
/// fatal.
pub fn gradaug(
    labeled: &[Example],
    teacher: &TaskModel,
    mlm: &MlmModel,
    vocab: &Vocab,
    config: &GradAugConfig,
    seed: u64,
) -> Result<AugmentationOutcome> {
    config.validate()?;
    let root = StreamRng::new(seed).derive_str("gradaug");
    // Ontology encodings are a function of the (fixed) teacher; encode
    // once and share across the example fan-out.
    let encodings = teacher.encode_ontology()?;
    let per_example: Vec<ExampleOutcome> = labeled
        .par_iter()
        .map(|example| {
            augment_example(teacher, &encodings, mlm, vocab, example, config, &root)
                .map_err(|e| (example.id.clone(), e.to_string()))
        })
        .collect();

    let mut outcome = AugmentationOutcome {
        augmented: labeled.to_vec(),
        records: Vec::new(),
        failures: Vec::new(),
    };
    for result in per_example {
        match result {
            Ok((examples, records)) => {
                outcome.augmented.extend(examples);
                outcome.records.extend(records);
            }
            Err((id, message)) => {
                log::warn!("augmentation skipped for {id}: {message}");
                outcome.failures.push((id, message));
            }
        }
    }
    Ok(outcome)
}
