//! Numerically stable scalar and vector primitives.
//!
//! Keys, values and queries are stored as `f32`; every reduction (dot
//! products, exponential sums, normalizers) accumulates in `f64`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("empty logits")]
    EmptyLogits,
    #[error("non-finite logit at index {0}")]
    NonFiniteLogit(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

fn check_logits(logits: &[f64]) -> Result<f64, NumericsError> {
    if logits.is_empty() {
        return Err(NumericsError::EmptyLogits);
    }
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in logits.iter().enumerate() {
        if !x.is_finite() {
            return Err(NumericsError::NonFiniteLogit(i));
        }
        if x > max {
            max = x;
        }
    }
    Ok(max)
}

/// Max-subtracted softmax. The largest entry maps to `exp(0)`, so no
/// intermediate can overflow.
pub fn stable_softmax(logits: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let max = check_logits(logits)?;
    let mut out: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// `log Σ exp(x)`, exact for a single element.
pub fn log_sum_exp(logits: &[f64]) -> Result<f64, NumericsError> {
    let max = check_logits(logits)?;
    if logits.len() == 1 {
        return Ok(logits[0]);
    }
    let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Log-domain sum of two log-masses. `NEG_INFINITY` is the empty mass.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Plain dot product accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Dot product against an `f64` vector (centroids are kept in `f64`).
#[inline]
pub fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * y).sum()
}

/// Scaled attention logit `(q·k)/√d`.
pub fn dot_scaled(q: &[f32], k: &[f32], d: usize) -> Result<f64, NumericsError> {
    if d == 0 {
        return Err(NumericsError::DimensionMismatch { expected: 1, got: 0 });
    }
    for v in [q, k] {
        if v.len() != d {
            return Err(NumericsError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    Ok(dot(q, k) / (d as f64).sqrt())
}

/// `1/√d` as used by every logit computation.
#[inline]
pub fn logit_scale(d: usize) -> f64 {
    1.0 / (d as f64).sqrt()
}
