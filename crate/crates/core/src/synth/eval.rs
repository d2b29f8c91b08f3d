use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Dataset, PromptRecord};
use crate::discovery::DiscoveryResult;
use crate::error::{Error, Result};
use crate::inference::{route_with_tolerance, RouterState};

use super::GroundTruth;

/// Adjusted Rand index between two labelings of the same items.
pub fn ari<A: Ord, B: Ord>(pred: &[A], truth: &[B]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("ari labelings", truth.len(), pred.len()));
    }
    let n = pred.len();
    let mut table: BTreeMap<(&A, &B), u64> = BTreeMap::new();
    let mut rows: BTreeMap<&A, u64> = BTreeMap::new();
    let mut cols: BTreeMap<&B, u64> = BTreeMap::new();
    for (a, b) in pred.iter().zip(truth) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let pairs = |x: u64| (x * x.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_a: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_b: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        // both labelings are all-singletons or both are one block
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Mean per-class F1 over the classes present in `truth`. A `None`
/// prediction counts as a miss for the true class.
pub fn macro_f1(pred: &[Option<usize>], truth: &[Option<usize>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim("f1 labelings", truth.len(), pred.len()));
    }
    let classes: BTreeSet<usize> = truth.iter().flatten().copied().collect();
    if classes.is_empty() {
        return Err(Error::invalid("f1 needs at least one labeled item"));
    }
    let mut total = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut miss) = (0.0, 0.0, 0.0);
        for (p, t) in pred.iter().zip(truth) {
            match (*p == Some(c), *t == Some(c)) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => miss += 1.0,
                (false, false) => {}
            }
        }
        total += 2.0 * tp / (2.0 * tp + fp + miss);
    }
    Ok(total / classes.len() as f64)
}

/// Planted task holding the most members of each discovered cluster, by
/// cluster id; ties go to the lower planted id.
pub fn majority_labels(result: &DiscoveryResult, truth: &GroundTruth) -> Result<Vec<Option<usize>>> {
    let index: BTreeMap<&str, usize> = truth.prompt_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    result
        .clusters
        .iter()
        .map(|c| {
            let mut votes: BTreeMap<Option<usize>, usize> = BTreeMap::new();
            for id in &c.member_prompt_ids {
                let &i = index
                    .get(id.as_str())
                    .ok_or_else(|| Error::invalid(format!("prompt {id} has no ground truth")))?;
                *votes.entry(truth.planted_task[i]).or_default() += 1;
            }
            let mut best: Option<(Option<usize>, usize)> = None;
            for (label, n) in votes {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((label, n));
                }
            }
            Ok(best.and_then(|(l, _)| l))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub prompts: usize,
    /// Mean of the observed quality of the chosen model.
    pub mean_quality: f64,
    /// Mean of the noise-free quality of the chosen model.
    pub mean_true_quality: f64,
    /// Mean noise-free quality of the per-prompt best model.
    pub oracle_quality: f64,
    pub oracle_ratio: f64,
    /// Mean of the per-prompt maximum observed quality.
    pub realized_oracle_quality: f64,
    pub realized_ratio: f64,
    pub mean_cost: f64,
    /// Share of prompts routed to each model.
    pub routing_share: Vec<f64>,
}

/// Scores a decision rule over `ds` against its ground truth.
pub fn eval_router(
    decide: &mut dyn FnMut(&PromptRecord) -> Result<usize>,
    ds: &Dataset,
    truth: &GroundTruth,
) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let truth = truth.for_dataset(ds)?;
    let n = ds.pool_size();
    let costs: Vec<f64> = ds.pool().iter().map(|m| m.cost_per_query).collect();
    let mut counts = vec![0usize; n];
    let (mut q, mut tq, mut oq, mut rq, mut c) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (i, r) in ds.records().iter().enumerate() {
        let m = decide(r)?;
        if m >= n {
            return Err(Error::invalid(format!("decider chose model {m} outside the pool")));
        }
        counts[m] += 1;
        q += r.quality[m];
        tq += truth.true_mean_quality[i][m];
        oq += truth.true_mean_quality[i][truth.oracle_choice[i]];
        rq += r.quality.iter().copied().fold(0.0, f64::max);
        c += costs[m];
    }
    let len = ds.len() as f64;
    Ok(EvalMetrics {
        prompts: ds.len(),
        mean_quality: q / len,
        mean_true_quality: tq / len,
        oracle_quality: oq / len,
        oracle_ratio: if oq > 0.0 { tq / oq } else { 1.0 },
        realized_oracle_quality: rq / len,
        realized_ratio: if rq > 0.0 { q / rq } else { 1.0 },
        mean_cost: c / len,
        routing_share: counts.iter().map(|&k| k as f64 / len).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub tolerance: f64,
    pub metrics: EvalMetrics,
}

/// One evaluation per tolerance value.
pub fn cost_curve(state: &RouterState, ds: &Dataset, truth: &GroundTruth, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    grid.iter()
        .map(|&tolerance| {
            let mut decide = |r: &PromptRecord| Ok(route_with_tolerance(state, &r.prompt_embedding, tolerance)?.chosen_model);
            Ok(CurvePoint {
                tolerance,
                metrics: eval_router(&mut decide, ds, truth)?,
            })
        })
        .collect()
}

/// Summary row plus one row per model with its routing share.
pub fn write_metrics_csv(m: &EvalMetrics, model_ids: &[String], path: &Path) -> Result<()> {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "prompts,{}", m.prompts);
    let _ = writeln!(out, "mean_quality,{}", m.mean_quality);
    let _ = writeln!(out, "mean_true_quality,{}", m.mean_true_quality);
    let _ = writeln!(out, "oracle_quality,{}", m.oracle_quality);
    let _ = writeln!(out, "oracle_ratio,{}", m.oracle_ratio);
    let _ = writeln!(out, "realized_oracle_quality,{}", m.realized_oracle_quality);
    let _ = writeln!(out, "realized_ratio,{}", m.realized_ratio);
    let _ = writeln!(out, "mean_cost,{}", m.mean_cost);
    for (id, s) in model_ids.iter().zip(&m.routing_share) {
        let _ = writeln!(out, "share:{id},{s}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut out = String::from("tolerance,mean_cost,mean_quality,mean_true_quality,oracle_ratio\n");
    for p in points {
        let m = &p.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.tolerance, m.mean_cost, m.mean_quality, m.mean_true_quality, m.oracle_ratio
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
