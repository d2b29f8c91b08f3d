//! Ranked lists of models, rank-biased overlap, and reciprocal-rank fusion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A full preference order over the model pool, most preferred first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    order: Vec<usize>,
    /// Fusion scores aligned with `order`, when the list came from fusion.
    scores: Option<Vec<f64>>,
}

/// Descending by score, ties to the lower model index.
fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

impl RankedList {
    /// Wraps `order` after checking it is a permutation of `0..order.len()`.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &m in &order {
            if m >= order.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid(format!(
                    "ranked list {order:?} is not a permutation"
                )));
            }
        }
        Ok(RankedList {
            order,
            scores: None,
        })
    }

    /// Orders models by descending quality; ties go to the lower index.
    pub fn from_quality(quality: &[f64]) -> Result<Self> {
        if quality.is_empty() {
            return Err(Error::invalid("cannot rank an empty quality vector"));
        }
        if quality.iter().any(|q| !q.is_finite()) {
            return Err(Error::invalid("quality vector has non-finite entries"));
        }
        let mut order: Vec<usize> = (0..quality.len()).collect();
        order.sort_by(by_score_desc(quality));
        Ok(RankedList {
            order,
            scores: None,
        })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Fused scores aligned with [`RankedList::order`] positions.
    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn top(&self) -> usize {
        self.order[0]
    }

    /// 1-based rank of `model`.
    pub fn rank_of(&self, model: usize) -> Result<usize> {
        self.order
            .iter()
            .position(|&m| m == model)
            .map(|p| p + 1)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "model index {model} out of range for a pool of {}",
                    self.order.len()
                ))
            })
    }

    /// 1-based rank of every model, indexed by model.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.order.len()];
        for (pos, &m) in self.order.iter().enumerate() {
            ranks[m] = pos + 1;
        }
        ranks
    }
}

/// Extrapolated rank-biased overlap of two permutations of the same pool.
///
/// With `A_d` the overlap of the two depth-`d` prefixes divided by `d`, the
/// value is `(1-p) * sum_{d=1..n} p^(d-1) A_d + p^n`. Both lists rank the
/// same `n` models, so agreement past depth `n` is exactly 1 and the tail
/// term is closed-form.
pub fn rbo(a: &RankedList, b: &RankedList, persistence: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "rbo over lists of different sizes ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if !(persistence > 0.0 && persistence < 1.0) {
        return Err(Error::invalid(format!(
            "rbo persistence {persistence} outside (0, 1)"
        )));
    }
    let n = a.len();
    let mut in_a = vec![false; n];
    let mut in_b = vec![false; n];
    let mut overlap = 0usize;
    let mut weight = 1.0;
    let mut sum = 0.0;
    for d in 0..n {
        let (x, y) = (a.order[d], b.order[d]);
        in_a[x] = true;
        if in_b[x] {
            overlap += 1;
        }
        in_b[y] = true;
        if in_a[y] {
            overlap += 1;
        }
        sum += weight * overlap as f64 / (d + 1) as f64;
        weight *= persistence;
    }
    // `weight` is now p^n.
    Ok((1.0 - persistence) * sum + weight)
}

/// Fuses ranked lists by mean reciprocal rank, `1/|C| * sum 1/(rank + eps)`
/// with 1-based ranks. Output is sorted by descending fused score, ties to
/// the lower index, and carries the scores.
pub fn rrf_fuse<'a, I>(lists: I, epsilon: f64) -> Result<RankedList>
where
    I: IntoIterator<Item = &'a RankedList>,
{
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::invalid(format!("rrf epsilon {epsilon} must be positive")));
    }
    // Reciprocal terms are summed in ascending rank order per model, so the
    // fused scores are bitwise independent of the order of `lists`.
    let mut ranks_by_model: Vec<Vec<usize>> = Vec::new();
    let mut count = 0usize;
    for list in lists {
        if count == 0 {
            ranks_by_model = vec![Vec::new(); list.len()];
        } else if list.len() != ranks_by_model.len() {
            return Err(Error::invalid(format!(
                "cannot fuse lists over {} and {} models",
                ranks_by_model.len(),
                list.len()
            )));
        }
        for (pos, &m) in list.order.iter().enumerate() {
            ranks_by_model[m].push(pos + 1);
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("cannot fuse zero ranked lists"));
    }
    let totals: Vec<f64> = ranks_by_model
        .iter_mut()
        .map(|ranks| {
            ranks.sort_unstable();
            let sum: f64 = ranks.iter().map(|&r| 1.0 / (r as f64 + epsilon)).sum();
            sum / count as f64
        })
        .collect();
    let mut order: Vec<usize> = (0..totals.len()).collect();
    order.sort_by(by_score_desc(&totals));
    let scores = order.iter().map(|&m| totals[m]).collect();
    Ok(RankedList {
        order,
        scores: Some(scores),
    })
}
