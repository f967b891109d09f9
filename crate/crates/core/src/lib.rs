//! Semi-supervised self-training for few-shot text tasks.
//!
//! The engine maintains a labeled pool `L` and an unlabeled pool `U`. A
//! Teacher model trained on `L` assigns pseudo-labels to the most confident
//! examples of `U`, which are moved into `L`; a freshly initialized Student
//! is then trained on `L` augmented by gradient-guided masked reconstruction
//! and becomes the next Teacher. The crate provides:
//!
//! - [`numeric`]: a minimal dense f64 kernel with a finite-difference
//!   gradient oracle and a splittable deterministic RNG,
//! - [`corpus`]: tokenization, vocabularies, JSONL corpus I/O, few-shot
//!   splits, and synthetic corpus generators,
//! - [`encoder`]: a small mean-pooling text encoder with exact analytic
//!   gradients, including gradients w.r.t. per-input token embeddings,
//! - [`heads`]: the four task heads (intent classification, dialog state
//!   tracking, dialog act prediction, response selection),
//! - [`model`]: the encoder+head container, SGD training with early
//!   stopping, prediction with confidence scores, and checkpointing,
//! - [`mlm`]: a small trainable masked-token model used for reconstruction,
//! - [`gradaug`]: saliency maps, smoothed saliency, inverse-importance
//!   masking distributions, and the augmentation driver,
//! - [`st`]: the self-training loop (warm-up, pseudo-labeling, selectors,
//!   student training, best-student selection),
//! - [`metrics`]: task metrics (accuracy suites, joint/slot accuracy,
//!   micro/macro F1, recall@k),
//! - [`harness`]: configuration-driven experiment runner with ablation and
//!   selector suites, JSON/CSV reports, and a built-in self-check.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradaug;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod mlm;
pub mod model;
pub mod numeric;
pub mod st;

pub use error::{Error, Result};
