//! Scalar ops shared across the networks: softmax and the pairwise
//! binary cross-entropy loss.

use crate::error::{GamError, Result};

/// Numerically stable softmax (max-shifted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(GamError::Precondition("softmax on empty vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    Ok(out)
}

/// Clamp a probability to [1e-7, 1 - 1e-7] before taking logs.
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(1e-7, 1.0 - 1e-7)
}

/// Binary cross-entropy of one prediction against a {0,1} label.
pub fn binary_cross_entropy(pred: f64, label: u8) -> Result<f64> {
    if label > 1 {
        return Err(GamError::Precondition(format!(
            "binary label must be 0 or 1, got {label}"
        )));
    }
    let p = clamp_prob(pred);
    Ok(if label == 1 { -p.ln() } else { -(1.0 - p).ln() })
}

/// d(bce)/d(pred), with the same clamping as the loss.
pub fn binary_cross_entropy_grad(pred: f64, label: u8) -> f64 {
    let p = clamp_prob(pred);
    if label == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Shannon entropy of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn softmax_uniform() {
        let p = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        for &x in &p {
            assert_abs_diff_eq!(x, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_analytic() {
        let p = softmax(&[2f64.ln(), 0.0]).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_no_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_empty_errors() {
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn bce_values() {
        assert_abs_diff_eq!(
            binary_cross_entropy(0.5, 1).unwrap(),
            std::f64::consts::LN_2,
            epsilon = 1e-12
        );
        assert!(binary_cross_entropy(0.999_999_9, 1).unwrap() < 1e-6);
        assert_abs_diff_eq!(
            binary_cross_entropy(0.9, 0).unwrap(),
            -(0.1f64.ln()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn bce_bad_label() {
        assert!(binary_cross_entropy(0.5, 2).is_err());
    }

    #[test]
    fn entropy_uniform_seven() {
        let p = vec![1.0 / 7.0; 7];
        assert_abs_diff_eq!(entropy(&p), 7f64.ln(), epsilon = 1e-12);
    }
}
