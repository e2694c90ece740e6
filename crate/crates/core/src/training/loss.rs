use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before the log.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassWeights {
    pub background: f64,
    pub lesion: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { background: 1.0, lesion: 5.0 }
    }
}

fn check<T>(probs: &[T], labels: &[u8], weights: &[T]) -> Result<()> {
    if probs.len() != 2 * labels.len() || weights.len() != labels.len() {
        return Err(Error::Shape(format!(
            "loss inputs disagree: {} probabilities, {} labels, {} weights",
            probs.len(),
            labels.len(),
            weights.len()
        )));
    }
    Ok(())
}

fn true_prob<T: Scalar>(probs: &[T], i: usize, label: u8) -> f64 {
    probs[2 * i + usize::from(label != 0)].as_f64()
}

/// `-(1/N) * sum(w * ln p_true)` over `N` pixels; `probs` is `N x 2`.
pub fn weighted_cross_entropy<T: Scalar>(probs: &[T], labels: &[u8], weights: &[T]) -> Result<f64> {
    check(probs, labels, weights)?;
    if labels.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&l, &w))| -w.as_f64() * true_prob(probs, i, l).clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

/// Gradient of [`weighted_cross_entropy`] with respect to the pre-softmax
/// logits: `w / N * (p - onehot)`, zero where the clip is active.
pub fn cross_entropy_logit_grad<T: Scalar>(probs: &[T], labels: &[u8], weights: &[T]) -> Result<Vec<T>> {
    check(probs, labels, weights)?;
    let n = T::lit(labels.len().max(1) as f64);
    let mut g = vec![T::zero(); probs.len()];
    for (i, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        let pt = true_prob(probs, i, l);
        if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&pt) {
            continue;
        }
        let t = usize::from(l != 0);
        for c in 0..2 {
            let onehot = if c == t { T::one() } else { T::zero() };
            g[2 * i + c] = w * (probs[2 * i + c] - onehot) / n;
        }
    }
    Ok(g)
}

pub fn class_weight_map<T: Scalar>(labels: &[u8], cw: &ClassWeights) -> Vec<T> {
    let (bg, fg) = (T::lit(cw.background), T::lit(cw.lesion));
    labels.iter().map(|&l| if l != 0 { fg } else { bg }).collect()
}
