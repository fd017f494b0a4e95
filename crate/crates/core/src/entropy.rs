//! Entropy primitives. Natural log throughout.

use crate::types::Distribution;

/// Floor applied inside log arguments when scoring observed outcomes.
pub const LOG_FLOOR: f64 = 1e-12;

/// `p ln p` with `0 ln 0 = 0`.
#[inline]
pub fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(dist: &Distribution) -> f64 {
    entropy_of(&dist.probs)
}

pub fn entropy_of(probs: &[f64]) -> f64 {
    let h = -probs.iter().map(|&p| xlogx(p)).sum::<f64>();
    // -0.0 and rounding below zero for degenerate inputs
    h.max(0.0)
}

/// Entropy of an unnormalized non-negative vector with known mass `total`:
/// `-Σ (p/t) ln (p/t) = (t ln t - Σ p ln p) / t`.
pub fn entropy_unnormalized(weights: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let s: f64 = weights.iter().map(|&p| xlogx(p)).sum();
    ((xlogx(total) - s) / total).max(0.0)
}

/// `ln max(p, LOG_FLOOR)`.
#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(LOG_FLOOR).ln()
}
