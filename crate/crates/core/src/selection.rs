//! Top-p and top-k selection.
//!
//! Every selector orders by descending score with ties going to the lower
//! original index. A prefix is accepted as soon as its cumulative mass is
//! `>= p`; `p = 1` always keeps every index.

use std::cmp::Ordering;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("threshold p = {0} outside (0, 1]")]
    BadThreshold(f64),
    #[error("invalid probability {value} at index {index}")]
    BadProbability { index: usize, value: f64 },
    #[error("empty input")]
    Empty,
    #[error("input not sorted (ascent at index {0})")]
    NotSorted(usize),
    #[error("budget {k} out of range 1..={len}")]
    BudgetOutOfRange { k: usize, len: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopPResult {
    /// Original indices, descending probability.
    pub selected: Vec<usize>,
    /// Normalized mass of `selected`, accumulated in `f64`.
    pub cumulative_mass: f64,
    pub threshold: f64,
}

impl TopPResult {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

pub(crate) fn check_threshold(p: f64) -> Result<(), SelectionError> {
    if p > 0.0 && p <= 1.0 {
        Ok(())
    } else {
        Err(SelectionError::BadThreshold(p))
    }
}

/// Descending order with ties to the lower index. NaN-free input assumed.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Shortest prefix of an already normalized, sorted sequence whose running
/// sum reaches `p`. Returns `(count, mass)`; stops reading right after the
/// accepting element.
fn prefix_scan<I: IntoIterator<Item = f64>>(sorted: I, len: usize, p: f64) -> (usize, f64) {
    let mut cum = 0.0f64;
    let mut count = 0;
    for x in sorted {
        cum += x;
        count += 1;
        if p < 1.0 && cum >= p {
            return (count, cum);
        }
    }
    (len, cum)
}

/// Smallest descending-probability prefix with normalized mass `>= p`.
///
/// Unnormalized nonnegative input is divided by its total first, so the
/// same routine serves renormalized subsets.
pub fn top_p_select(probs: &[f64], p: f64) -> Result<TopPResult, SelectionError> {
    check_threshold(p)?;
    if probs.is_empty() {
        return Err(SelectionError::Empty);
    }
    for (index, &value) in probs.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(SelectionError::BadProbability { index, value });
        }
    }
    let total: f64 = probs.iter().sum();
    let order = descending_order(probs);
    if total <= 0.0 {
        return Ok(TopPResult {
            selected: order,
            cumulative_mass: 0.0,
            threshold: p,
        });
    }
    let (count, cum) = prefix_scan(order.iter().map(|&i| probs[i] / total), order.len(), p);
    let mut selected = order;
    selected.truncate(count);
    Ok(TopPResult {
        selected,
        cumulative_mass: cum,
        threshold: p,
    })
}

/// Prefix length for probabilities that are already sorted descending.
///
/// The input is taken as a probability vector (no renormalization); the
/// accumulation stops at the first prefix reaching `p`.
pub fn top_p_select_sorted(sorted_probs: &[f64], p: f64) -> Result<usize, SelectionError> {
    check_threshold(p)?;
    if sorted_probs.is_empty() {
        return Err(SelectionError::Empty);
    }
    for (index, &value) in sorted_probs.iter().enumerate() {
        if !(value >= 0.0 && value.is_finite()) {
            return Err(SelectionError::BadProbability { index, value });
        }
    }
    if let Some(i) = sorted_probs.windows(2).position(|w| w[1] > w[0]) {
        return Err(SelectionError::NotSorted(i + 1));
    }
    Ok(prefix_scan(sorted_probs.iter().copied(), sorted_probs.len(), p).0)
}

/// The `k` highest-scoring indices, descending, ties to the lower index.
pub fn top_k_select(scores: &[f64], k: usize) -> Result<Vec<usize>, SelectionError> {
    if k == 0 || k > scores.len() {
        return Err(SelectionError::BudgetOutOfRange {
            k,
            len: scores.len(),
        });
    }
    let mut order = descending_order(scores);
    order.truncate(k);
    Ok(order)
}
