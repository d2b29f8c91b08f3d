//! Iterative task discovery over the prompt graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::graph::build_graph;
use super::leiden::leiden_partition;
use crate::artifact::Artifact;
use crate::config::PipelineConfig;
use crate::data::{Dataset, ModelCard, PromptRecord};
use crate::error::{Error, Result};
use crate::rank::{rrf_fuse, RankedList};

/// A discovered task type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCluster {
    pub task_id: usize,
    /// In dataset order.
    pub member_prompt_ids: Vec<String>,
    /// Element-wise median of the members' description embeddings.
    pub center: Vec<f64>,
    pub fused_list: RankedList,
    pub median_quality: Vec<f64>,
    /// Shortest prefix of `fused_list` covering the members' top models.
    pub candidates: Vec<usize>,
    /// Seeds the classifier's task encoding.
    pub description_embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryResult {
    pub clusters: Vec<TaskCluster>,
    /// Per-model medians over the prompts left in no cluster.
    pub others_median_quality: Vec<f64>,
    pub assignment: BTreeMap<String, Option<usize>>,
}

impl Artifact for DiscoveryResult {
    const KIND: [u8; 4] = *b"DISC";
}

impl DiscoveryResult {
    pub fn pool_size(&self) -> usize {
        self.others_median_quality.len()
    }

    pub fn cluster(&self, task_id: usize) -> Option<&TaskCluster> {
        self.clusters.get(task_id).filter(|c| c.task_id == task_id)
    }

    /// Prompt ids of the Others pool, sorted.
    pub fn others(&self) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, t)| t.is_none())
            .map(|(id, _)| id.as_str())
            .collect()
    }
}

/// Lower median: the coordinate-wise middle value, the lower one of the
/// middle pair for even counts.
fn lower_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// Midpoint median: the mean of the middle pair for even counts.
pub fn midpoint_median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub center: Vec<f64>,
    pub fused_list: RankedList,
    pub median_quality: Vec<f64>,
}

pub fn median_quality(members: &[&PromptRecord]) -> Vec<f64> {
    let n = members[0].quality.len();
    (0..n)
        .map(|m| midpoint_median(members.iter().map(|r| r.quality[m]).collect()))
        .collect()
}

/// Center, fused ranking and per-model median quality of a member set.
pub fn summarize(members: &[&PromptRecord], epsilon: f64) -> Result<Summary> {
    if members.is_empty() {
        return Err(Error::invalid("cannot summarize an empty cluster"));
    }
    let d = members[0].desc_embedding.len();
    let center = (0..d)
        .map(|i| lower_median(members.iter().map(|r| r.desc_embedding[i]).collect()))
        .collect();
    let lists = members
        .iter()
        .map(|r| RankedList::from_quality(&r.quality))
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary {
        center,
        fused_list: rrf_fuse(&lists, epsilon)?,
        median_quality: median_quality(members),
    })
}

/// Share of `top_models` that fall in `candidates`.
pub fn coverage(top_models: &[usize], candidates: &[usize]) -> f64 {
    if top_models.is_empty() {
        return 1.0;
    }
    let hits = top_models.iter().filter(|m| candidates.contains(m)).count();
    hits as f64 / top_models.len() as f64
}

/// Shortest prefix of `fused` whose coverage reaches `delta`; the whole
/// pool when none does.
pub fn select_candidates(fused: &RankedList, top_models: &[usize], delta: f64) -> Vec<usize> {
    let order = fused.order();
    let total = top_models.len();
    let mut hits = 0;
    for (len, &m) in order.iter().enumerate() {
        hits += top_models.iter().filter(|&&t| t == m).count();
        if total == 0 || hits as f64 / total as f64 >= delta - 1e-12 {
            return order[..=len].to_vec();
        }
    }
    order.to_vec()
}

/// Groups of record indices, merged level by level.
fn cluster_level(
    records: &[PromptRecord],
    groups: &[Vec<usize>],
    cfg: &PipelineConfig,
    level: usize,
) -> Result<Vec<Vec<usize>>> {
    if groups.len() < 2 {
        return Ok(groups.to_vec());
    }
    let summaries = groups
        .iter()
        .map(|g| {
            let members: Vec<&PromptRecord> = g.iter().map(|&i| &records[i]).collect();
            summarize(&members, cfg.rrf_epsilon)
        })
        .collect::<Result<Vec<_>>>()?;
    let nodes: Vec<(&[f64], &RankedList)> = summaries
        .iter()
        .map(|s| (s.center.as_slice(), &s.fused_list))
        .collect();
    let graph = build_graph(&nodes, cfg.knn_k, cfg.rbo_threshold, cfg.rbo_persistence)?;
    let parts = leiden_partition(&graph, cfg.leiden_resolution, cfg.seed.wrapping_add(level as u64))?;
    let count = parts.iter().max().map_or(0, |m| m + 1);
    let mut merged = vec![Vec::new(); count];
    for (g, &c) in groups.iter().zip(&parts) {
        merged[c].extend_from_slice(g);
    }
    for m in &mut merged {
        m.sort_unstable();
    }
    Ok(merged)
}

/// Runs the full discovery stage over a training dataset.
pub fn iterative_cluster(ds: &Dataset, cfg: &PipelineConfig) -> Result<DiscoveryResult> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Error::invalid("discovery needs at least two prompts"));
    }
    let records = ds.records();
    let lists = records
        .iter()
        .map(|r| RankedList::from_quality(&r.quality))
        .collect::<Result<Vec<_>>>()?;
    let nodes: Vec<(&[f64], &RankedList)> = records
        .iter()
        .zip(&lists)
        .map(|(r, l)| (r.desc_embedding.as_slice(), l))
        .collect();
    let graph = build_graph(&nodes, cfg.knn_k, cfg.rbo_threshold, cfg.rbo_persistence)?;
    let parts = leiden_partition(&graph, cfg.leiden_resolution, cfg.seed)?;
    let degree = graph.degrees();

    let mut others: Vec<usize> = (0..records.len()).filter(|&i| degree[i] == 0).collect();
    let count = parts.iter().max().map_or(0, |m| m + 1);
    let mut groups = vec![Vec::new(); count];
    for (i, &c) in parts.iter().enumerate() {
        if degree[i] > 0 {
            groups[c].push(i);
        }
    }
    groups.retain(|g| !g.is_empty());

    for level in 1..cfg.leiden_iterations {
        groups = cluster_level(records, &groups, cfg, level)?;
    }

    let (mut kept, small): (Vec<Vec<usize>>, Vec<Vec<usize>>) =
        groups.into_iter().partition(|g| g.len() >= cfg.min_cluster_size);
    others.extend(small.into_iter().flatten());
    others.sort_unstable();
    kept.sort_by_key(|g| g[0]);

    let mut assignment: BTreeMap<String, Option<usize>> = BTreeMap::new();
    let mut clusters = Vec::with_capacity(kept.len());
    for (task_id, members) in kept.iter().enumerate() {
        let recs: Vec<&PromptRecord> = members.iter().map(|&i| &records[i]).collect();
        let s = summarize(&recs, cfg.rrf_epsilon)?;
        let tops: Vec<usize> = members.iter().map(|&i| lists[i].top()).collect();
        let candidates = select_candidates(&s.fused_list, &tops, cfg.coverage_threshold);
        for r in &recs {
            assignment.insert(r.prompt_id.clone(), Some(task_id));
        }
        clusters.push(TaskCluster {
            task_id,
            member_prompt_ids: recs.iter().map(|r| r.prompt_id.clone()).collect(),
            description_embedding: s.center.clone(),
            center: s.center,
            fused_list: s.fused_list,
            median_quality: s.median_quality,
            candidates,
        });
    }
    for &i in &others {
        assignment.insert(records[i].prompt_id.clone(), None);
    }
    let others_median_quality = if others.is_empty() {
        median_quality(&records.iter().collect::<Vec<_>>())
    } else {
        median_quality(&others.iter().map(|&i| &records[i]).collect::<Vec<_>>())
    };
    log::info!(
        "discovered {} tasks, {} prompts in Others",
        clusters.len(),
        others.len()
    );
    Ok(DiscoveryResult {
        clusters,
        others_median_quality,
        assignment,
    })
}

/// One line per cluster: id, size, candidate model ids, top three sources.
pub fn cluster_report(result: &DiscoveryResult, ds: &Dataset) -> String {
    let source: BTreeMap<&str, &str> = ds
        .records()
        .iter()
        .map(|r| (r.prompt_id.as_str(), r.source.as_str()))
        .collect();
    let name = |m: usize, pool: &[ModelCard]| pool.get(m).map_or_else(|| m.to_string(), |c| c.model_id.clone());
    let mut out = String::new();
    for c in &result.clusters {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for id in &c.member_prompt_ids {
            *counts.entry(source.get(id.as_str()).copied().unwrap_or("?")).or_default() += 1;
        }
        let mut top: Vec<(&str, usize)> = counts.into_iter().collect();
        top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let sources: Vec<String> = top.iter().take(3).map(|(s, n)| format!("{s}:{n}")).collect();
        let cands: Vec<String> = c.candidates.iter().map(|&m| name(m, ds.pool())).collect();
        let _ = writeln!(
            out,
            "task {}\tsize {}\tcandidates [{}]\tsources {}",
            c.task_id,
            c.member_prompt_ids.len(),
            cands.join(", "),
            sources.join(" ")
        );
    }
    let _ = writeln!(out, "others\tsize {}", result.others().len());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(id: &str, desc: Vec<f64>, quality: Vec<f64>) -> PromptRecord {
        PromptRecord {
            prompt_id: id.into(),
            source: "t".into(),
            prompt_embedding: desc.clone(),
            desc_embedding: desc,
            quality,
        }
    }

    #[test]
    fn singleton_summary_is_the_member() {
        let r = rec("a", vec![0.3, -1.0], vec![0.2, 0.9, 0.5]);
        let s = summarize(&[&r], 60.0).unwrap();
        assert_eq!(s.center, r.desc_embedding);
        assert_eq!(s.fused_list.order(), &[1, 2, 0]);
        assert_eq!(s.median_quality, r.quality);
    }

    #[test]
    fn two_point_quality_median_is_the_midpoint() {
        let a = rec("a", vec![0.0], vec![0.4]);
        let b = rec("b", vec![1.0], vec![0.8]);
        let s = summarize(&[&a, &b], 60.0).unwrap();
        assert!((s.median_quality[0] - 0.6).abs() < 1e-15);
        assert_eq!(s.center, vec![0.0]);
    }

    #[test]
    fn three_member_summary() {
        let a = rec("a", vec![1.0, 0.0], vec![0.9, 0.1, 0.5]);
        let b = rec("b", vec![0.0, 1.0], vec![0.2, 0.8, 0.3]);
        let c = rec("c", vec![1.0, 1.0], vec![0.7, 0.6, 0.1]);
        let s = summarize(&[&a, &b, &c], 60.0).unwrap();
        assert_eq!(s.center, vec![1.0, 1.0]);
        // ranks: a [0,2,1], b [1,2,0], c [0,1,2]
        let score = |ranks: [f64; 3]| ranks.iter().map(|r| 1.0 / (r + 60.0)).sum::<f64>() / 3.0;
        let m0 = score([1.0, 3.0, 1.0]);
        let m1 = score([3.0, 1.0, 2.0]);
        let m2 = score([2.0, 2.0, 3.0]);
        assert!(m0 > m1 && m1 > m2);
        assert_eq!(s.fused_list.order(), &[0, 1, 2]);
        assert!((s.fused_list.scores().unwrap()[0] - m0).abs() < 1e-15);
    }

    #[test]
    fn coverage_examples() {
        let tops = [0, 0, 1, 2, 0];
        assert_eq!(coverage(&tops, &[0, 1, 2, 3]), 1.0);
        assert!((coverage(&tops, &[0]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn candidate_examples() {
        let fused = RankedList::new(vec![0, 1, 2, 3]).unwrap();
        assert_eq!(select_candidates(&fused, &[0, 0, 1, 2, 0], 0.8), vec![0, 1]);
        assert_eq!(select_candidates(&fused, &[0, 0, 0], 1.0), vec![0]);
        let fused = RankedList::new(vec![3, 0, 4, 1, 2, 5]).unwrap();
        assert_eq!(select_candidates(&fused, &[0, 1, 2, 0], 1.0), vec![3, 0, 4, 1, 2]);
    }

    fn brute_force_prefix(order: &[usize], tops: &[usize], delta: f64) -> Vec<usize> {
        for len in 1..=order.len() {
            let prefix = &order[..len];
            let hits = tops.iter().filter(|t| prefix.contains(t)).count();
            if hits as f64 / tops.len() as f64 >= delta - 1e-12 {
                return prefix.to_vec();
            }
        }
        order.to_vec()
    }

    proptest! {
        #[test]
        fn coverage_counts_and_selection_is_minimal(
            order in Just((0..8).collect::<Vec<usize>>()).prop_shuffle(),
            tops in proptest::collection::vec(0usize..8, 1..50),
            delta in 0.05f64..1.0,
        ) {
            let fused = RankedList::new(order.clone()).unwrap();
            let cands = select_candidates(&fused, &tops, delta);
            prop_assert_eq!(&cands, &brute_force_prefix(&order, &tops, delta));
            let hits = tops.iter().filter(|t| cands.contains(t)).count();
            prop_assert_eq!(coverage(&tops, &cands), hits as f64 / tops.len() as f64);
            prop_assert!(coverage(&tops, &cands) >= delta - 1e-12 || cands.len() == 8);
        }
    }
}
