//! Online routing: classify, estimate, blend with task medians, pick a model.

use serde::{Deserialize, Serialize};

use crate::classifier::{classify, ClassifierParams, TaskAssignment};
use crate::config::PipelineConfig;
use crate::data::ModelCard;
use crate::discovery::DiscoveryResult;
use crate::error::{Error, Result};
use crate::neural::minmax_norm;
use crate::router::{estimate, RouterParams};

/// Everything a routing call reads. Immutable once built.
#[derive(Debug, Clone)]
pub struct RouterState {
    pub config: PipelineConfig,
    pub pool: Vec<ModelCard>,
    pub discovery: DiscoveryResult,
    pub classifier: ClassifierParams,
    pub router: RouterParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub chosen_model: usize,
    pub final_scores: Vec<f64>,
    pub task_id: Option<usize>,
    pub stage1_scores: Vec<f64>,
    pub stage2_scores: Vec<f64>,
    pub cost: f64,
}

impl RouterState {
    /// Checks that every artifact agrees on pool size and embedding width.
    pub fn new(
        config: PipelineConfig,
        pool: Vec<ModelCard>,
        discovery: DiscoveryResult,
        classifier: ClassifierParams,
        router: RouterParams,
    ) -> Result<Self> {
        let n = pool.len();
        if discovery.pool_size() != n {
            return Err(Error::dim("discovery pool size", n, discovery.pool_size()));
        }
        if router.pool_size() != n {
            return Err(Error::dim("router pool size", n, router.pool_size()));
        }
        if let Some(c) = discovery.clusters.iter().find(|c| c.median_quality.len() != n) {
            return Err(Error::dim(format!("task {} medians", c.task_id), n, c.median_quality.len()));
        }
        if classifier.task_count() != discovery.clusters.len() {
            return Err(Error::dim("classifier task rows", discovery.clusters.len(), classifier.task_count()));
        }
        if classifier.prompt_dim() != router.prompt_dim() {
            return Err(Error::dim("router prompt dim", classifier.prompt_dim(), router.prompt_dim()));
        }
        Ok(RouterState {
            config,
            pool,
            discovery,
            classifier,
            router,
        })
    }

    pub fn prompt_dim(&self) -> usize {
        self.classifier.prompt_dim()
    }

    pub fn costs(&self) -> Vec<f64> {
        self.pool.iter().map(|m| m.cost_per_query).collect()
    }
}

/// Task medians for the assigned task, Others medians otherwise.
pub fn stage1_scores(result: &DiscoveryResult, assignment: &TaskAssignment) -> Vec<f64> {
    match assignment.task_id {
        Some(t) => match result.cluster(t) {
            Some(c) => c.median_quality.clone(),
            None => {
                log::warn!("task {t} is not in the discovery result; using Others medians");
                result.others_median_quality.clone()
            }
        },
        None => result.others_median_quality.clone(),
    }
}

/// `alpha * norm(stage2) + (1 - alpha) * norm(stage1)`.
pub fn aggregate(stage2: &[f64], stage1: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if stage2.len() != stage1.len() {
        return Err(Error::dim("aggregate inputs", stage2.len(), stage1.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    let a = minmax_norm(stage2);
    let b = minmax_norm(stage1);
    Ok(a.iter().zip(&b).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect())
}

/// Highest score; ties go to the cheaper model, then the lower index.
pub fn select_best(scores: &[f64], costs: &[f64]) -> usize {
    let mut best = 0;
    for m in 1..scores.len() {
        let better = scores[m] > scores[best] || (scores[m] == scores[best] && costs[m] < costs[best]);
        if better {
            best = m;
        }
    }
    best
}

/// Cheapest model scoring within `tolerance` of the best; ties go to the
/// higher score, then the lower index.
pub fn select_with_tolerance(scores: &[f64], costs: &[f64], tolerance: f64) -> usize {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = max - tolerance;
    let mut best: Option<usize> = None;
    for m in 0..scores.len() {
        if scores[m] < floor {
            continue;
        }
        best = Some(match best {
            None => m,
            Some(b) => {
                let better = costs[m] < costs[b] || (costs[m] == costs[b] && scores[m] > scores[b]);
                if better {
                    m
                } else {
                    b
                }
            }
        });
    }
    best.expect("the top scorer is always feasible")
}

fn decide(state: &RouterState, embedding: &[f64], pick: impl Fn(&[f64], &[f64]) -> usize) -> Result<RoutingDecision> {
    let assignment = classify(&state.classifier, embedding, state.config.classifier_threshold)?;
    let raw1 = stage1_scores(&state.discovery, &assignment);
    let raw2 = estimate(&state.router, embedding, &assignment)?.scores;
    let final_scores = aggregate(&raw2, &raw1, state.config.alpha)?;
    let costs = state.costs();
    let chosen = pick(&final_scores, &costs);
    Ok(RoutingDecision {
        chosen_model: chosen,
        task_id: assignment.task_id,
        stage1_scores: minmax_norm(&raw1),
        stage2_scores: minmax_norm(&raw2),
        cost: costs[chosen],
        final_scores,
    })
}

pub fn route(state: &RouterState, embedding: &[f64]) -> Result<RoutingDecision> {
    decide(state, embedding, select_best)
}

pub fn route_with_tolerance(state: &RouterState, embedding: &[f64], tolerance: f64) -> Result<RoutingDecision> {
    if !(0.0..=1.0).contains(&tolerance) {
        return Err(Error::invalid(format!("tolerance {tolerance} outside [0, 1]")));
    }
    if tolerance == 0.0 {
        return route(state, embedding);
    }
    decide(state, embedding, |s, c| select_with_tolerance(s, c, tolerance))
}
