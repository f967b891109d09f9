//! Minimal dense f64 kernel: matrices, activations, losses, Gaussian
//! sampling, and a central finite-difference gradient oracle.
//!
//! Everything here is pure and re-entrant. All log-losses floor
//! probabilities at [`PROB_FLOOR`] so they never return infinity.

mod mat;
mod rng;

pub use mat::Mat64;
pub use rng::StreamRng;

use crate::error::{Error, Result};

/// Probability floor applied inside log-losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stabilized softmax (max-subtraction before exponentiation).
///
/// Output entries lie in (0, 1) and sum to 1 within 1e-12.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("softmax of non-finite logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::InvalidInput("sigmoid of non-finite value".into()));
    }
    // Branch on sign to avoid overflow in exp.
    if x >= 0.0 {
        Ok(1.0 / (1.0 + (-x).exp()))
    } else {
        let e = x.exp();
        Ok(e / (1.0 + e))
    }
}

/// Cosine similarity between two equal-length vectors.
///
/// A zero-norm operand is a degenerate input and is reported as an error
/// rather than silently scored 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateInput("cosine of zero-norm vector".into()));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Cross-entropy `-ln p[target]` with the probability floored at
/// [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    if target >= probs.len() {
        return Err(Error::IndexOutOfRange(format!(
            "cross-entropy target {} for {} classes",
            target,
            probs.len()
        )));
    }
    Ok(-probs[target].max(PROB_FLOOR).ln())
}

/// Mean binary cross-entropy over dimensions, scores floored to
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn binary_cross_entropy(scores: &[f64], targets: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "bce of {} scores and {} targets",
            scores.len(),
            targets.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("bce of empty vectors".into()));
    }
    let mut total = 0.0;
    for (&s, &t) in scores.iter().zip(targets) {
        let s = s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        total += if t { -s.ln() } else { -(1.0 - s).ln() };
    }
    Ok(total / scores.len() as f64)
}

/// `dim` i.i.d. draws from N(0, variance). Variance 0 yields exactly the
/// zero vector.
pub fn gaussian_sample(rng: &mut StreamRng, dim: usize, variance: f64) -> Result<Vec<f64>> {
    if variance < 0.0 || !variance.is_finite() {
        return Err(Error::InvalidInput(format!(
            "gaussian variance must be finite and >= 0, got {variance}"
        )));
    }
    if variance == 0.0 {
        return Ok(vec![0.0; dim]);
    }
    let sd = variance.sqrt();
    Ok((0..dim).map(|_| rng.normal() * sd).collect())
}

/// Central finite differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)`.
///
/// The ground-truth checker for every analytic gradient in this crate.
pub fn finite_difference_grad<F>(f: F, x: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = f(&probe);
        probe[i] = orig - eps;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite evaluation while differencing coordinate {i}"
            )));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Dot product of equal-length slices.
pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Euclidean norm.
pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

/// Relative error between two gradient vectors, norm-based. Two vectors
/// that are both essentially zero compare as 0.
pub fn gradient_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_logit_is_identity() {
        assert_eq!(softmax(&[-7.3]).unwrap(), vec![1.0]);
    }

    #[test]
    fn softmax_hand_case() {
        // logits ln 1, ln 2, ln 3 put mass 1/6, 2/6, 3/6 on the classes.
        let p = softmax(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((p[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        assert!(softmax(&[f64::INFINITY]).is_err());
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let logits = [3.2, -1.0, 0.5, 7.7];
        let p = softmax(&logits).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = logits.iter().map(|x| x + 123.456).collect();
        let q = softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0).unwrap(), 0.5);
        assert!((sigmoid(50.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((sigmoid(3.0f64.ln()).unwrap() - 0.75).abs() < 1e-15);
        assert!(sigmoid(f64::NAN).is_err());
    }

    #[test]
    fn cosine_cases() {
        let u = [1.0, 2.0, -0.5];
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn cosine_scale_invariant() {
        let u = [0.3, -2.0, 1.5];
        let v = [1.1, 0.4, -0.7];
        let su: Vec<f64> = u.iter().map(|x| x * 7.0).collect();
        let sv: Vec<f64> = v.iter().map(|x| x * 0.01).collect();
        let a = cosine(&u, &v).unwrap();
        let b = cosine(&su, &sv).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        let one_hot = [1.0 - 1e-12, 1e-12 / 3.0, 1e-12 / 3.0];
        assert!(cross_entropy(&one_hot, 0).unwrap() < 1e-11);
        let uniform = [0.25; 4];
        assert!((cross_entropy(&uniform, 2).unwrap() - 4.0f64.ln()).abs() < 1e-12);
        // Floor contract: a zero probability costs -ln(1e-12), not infinity.
        let degenerate = [0.0, 1.0];
        assert_eq!(cross_entropy(&degenerate, 0).unwrap(), -PROB_FLOOR.ln());
        assert!(cross_entropy(&uniform, 4).is_err());
    }

    #[test]
    fn bce_cases() {
        let hits = [1.0 - 1e-12, 1e-12];
        assert!(binary_cross_entropy(&hits, &[true, false]).unwrap() < 1e-11);
        let halves = [0.5, 0.5, 0.5];
        let loss = binary_cross_entropy(&halves, &[true, false, true]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
        assert!(binary_cross_entropy(&[0.5], &[true, false]).is_err());
    }

    #[test]
    fn gaussian_zero_variance_is_zero_vector() {
        let mut rng = StreamRng::new(1);
        let v = gaussian_sample(&mut rng, 8, 0.0).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gaussian_rejects_negative_variance() {
        let mut rng = StreamRng::new(1);
        assert!(gaussian_sample(&mut rng, 4, -1.0).is_err());
    }

    #[test]
    fn gaussian_moments() {
        // Law-of-large-numbers check at variance 1e-4 over 10^6 draws.
        let mut rng = StreamRng::new(42);
        let n = 1_000_000;
        let v = gaussian_sample(&mut rng, n, 1e-4).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3e-5, "sample mean {mean}");
        assert!((var - 1e-4).abs() < 0.05 * 1e-4, "sample variance {var}");
    }

    #[test]
    fn gaussian_deterministic_per_seed() {
        let mut a = StreamRng::new(7);
        let mut b = StreamRng::new(7);
        assert_eq!(
            gaussian_sample(&mut a, 16, 0.5).unwrap(),
            gaussian_sample(&mut b, 16, 0.5).unwrap()
        );
    }

    #[test]
    fn finite_difference_on_known_functions() {
        let sum = |x: &[f64]| x.iter().sum::<f64>();
        let g = finite_difference_grad(sum, &[0.3, -1.2, 5.0], 1e-5).unwrap();
        for v in &g {
            assert!((v - 1.0).abs() < 1e-9);
        }

        let sq_norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
        let g = finite_difference_grad(sq_norm, &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);

        let constant = |_: &[f64]| 3.5;
        let g = finite_difference_grad(constant, &[1.0, -1.0, 0.0], 1e-4).unwrap();
        for v in &g {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_validates_inputs() {
        let f = |x: &[f64]| x[0];
        assert!(finite_difference_grad(f, &[1.0], 1e-8).is_err());
        assert!(finite_difference_grad(f, &[1.0], 1e-2).is_err());
        let bad = |x: &[f64]| x[0].ln();
        assert!(finite_difference_grad(bad, &[0.0], 1e-5).is_err());
    }
}
