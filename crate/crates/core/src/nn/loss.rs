use super::Scalar;
use crate::error::{Error, Result};

pub const BCE_EPS: f64 = 1e-12;

/// Mean binary cross-entropy with probabilities clipped to `[ε, 1 − ε]`.
pub fn bce_loss<T: Scalar>(probs: &[T], labels: &[u8]) -> Result<T> {
    if probs.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Ok(T::zero());
    }
    let eps = T::of(BCE_EPS);
    let total: T = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(T::one() - eps);
            if y != 0 {
                -p.ln()
            } else {
                -(T::one() - p).ln()
            }
        })
        .sum();
    Ok(total / T::of(probs.len() as f64))
}

/// Per-row gradient of the mean loss with respect to the pre-sigmoid logit.
pub fn bce_logit_grad<T: Scalar>(probs: &[T], labels: &[u8]) -> Vec<T> {
    let inv = T::one() / T::of(probs.len().max(1) as f64);
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| (p - T::of(f64::from(y))) * inv)
        .collect()
}
