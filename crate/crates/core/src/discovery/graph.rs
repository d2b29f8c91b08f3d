//! Sparse prompt graph: kNN on embeddings, filtered and weighted by ranking
//! agreement.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rank::{rbo, RankedList};

/// Lower bound on edge weights. Min-max scaling sends the weakest surviving
/// edge's signal to zero; the floor keeps every weight strictly positive.
pub const MIN_EDGE_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub weight: f64,
}

/// Raw similarity signals behind one edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeSignal {
    pub cosine: f64,
    pub rbo: f64,
}

/// Undirected simple graph. Edges have `u < v` and are sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptGraph {
    pub node_count: usize,
    pub edges: Vec<Edge>,
    /// Aligned with `edges` when the graph came from [`build_graph`].
    pub signals: Vec<EdgeSignal>,
    /// Nodes skipped because their embedding has zero norm.
    pub zero_norm_nodes: Vec<usize>,
}

impl PromptGraph {
    /// Graph from explicit weighted edges, canonicalized and validated.
    pub fn from_edges(node_count: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut out: Vec<Edge> = Vec::with_capacity(edges.len());
        for &(a, b, w) in edges {
            if a == b || a.max(b) >= node_count {
                return Err(Error::invalid(format!("bad edge ({a}, {b}) on {node_count} nodes")));
            }
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::invalid(format!("edge ({a}, {b}) has weight {w}")));
            }
            out.push(Edge {
                u: a.min(b),
                v: a.max(b),
                weight: w,
            });
        }
        out.sort_by_key(|e| (e.u, e.v));
        if out.windows(2).any(|w| (w[0].u, w[0].v) == (w[1].u, w[1].v)) {
            return Err(Error::invalid("duplicate edge"));
        }
        Ok(PromptGraph {
            node_count,
            edges: out,
            signals: Vec::new(),
            zero_norm_nodes: Vec::new(),
        })
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_count];
        for e in &self.edges {
            d[e.u] += 1;
            d[e.v] += 1;
        }
        d
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((d / (na * nb)).clamp(-1.0, 1.0))
}

/// Min-max scaling over edges; a constant signal maps to 1.
fn scale_signal(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|x| (x - lo) / (hi - lo)).collect()
    } else {
        vec![1.0; values.len()]
    }
}

/// Indices of the `k` most cosine-similar other nodes, ties to the lower index.
fn nearest(u: usize, unit: &[Option<Vec<f64>>], k: usize) -> Vec<usize> {
    let Some(eu) = &unit[u] else {
        return Vec::new();
    };
    let mut sims: Vec<(f64, usize)> = unit
        .iter()
        .enumerate()
        .filter(|&(v, _)| v != u)
        .filter_map(|(v, e)| e.as_ref().map(|ev| (dot(eu, ev), v)))
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    sims.truncate(k);
    sims.into_iter().map(|(_, v)| v).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Builds the prompt graph.
///
/// The candidate edges are the union of every node's `k` nearest neighbors
/// by cosine similarity. A candidate survives when the RBO of its endpoint
/// rankings is at least `tau`. Survivors are weighted by the geometric mean
/// of min-max scaled cosine and RBO, floored at [`MIN_EDGE_WEIGHT`].
pub fn build_graph(
    nodes: &[(&[f64], &RankedList)],
    k: usize,
    tau: f64,
    persistence: f64,
) -> Result<PromptGraph> {
    if k == 0 {
        return Err(Error::invalid("knn k must be positive"));
    }
    if nodes.len() < 2 {
        return Err(Error::invalid("a prompt graph needs at least two nodes"));
    }
    let dim = nodes[0].0.len();
    let pool = nodes[0].1.len();
    for (emb, list) in nodes {
        if emb.len() != dim {
            return Err(Error::dim("graph node embedding", dim, emb.len()));
        }
        if list.len() != pool {
            return Err(Error::dim("graph node ranking", pool, list.len()));
        }
    }

    let mut zero_norm_nodes = Vec::new();
    let unit: Vec<Option<Vec<f64>>> = nodes
        .iter()
        .enumerate()
        .map(|(i, (emb, _))| {
            let n = norm(emb);
            if n == 0.0 {
                zero_norm_nodes.push(i);
                None
            } else {
                Some(emb.iter().map(|x| x / n).collect())
            }
        })
        .collect();
    if !zero_norm_nodes.is_empty() {
        log::warn!("{} graph nodes have zero-norm embeddings", zero_norm_nodes.len());
    }

    let mut candidates = BTreeSet::new();
    for u in 0..nodes.len() {
        for v in nearest(u, &unit, k) {
            candidates.insert((u.min(v), u.max(v)));
        }
    }

    let mut kept = Vec::new();
    let mut signals = Vec::new();
    for (u, v) in candidates {
        let r = rbo(nodes[u].1, nodes[v].1, persistence)?;
        if r >= tau {
            let c = dot(unit[u].as_ref().expect("nonzero"), unit[v].as_ref().expect("nonzero"));
            kept.push((u, v));
            signals.push(EdgeSignal {
                cosine: c.clamp(-1.0, 1.0),
                rbo: r,
            });
        }
    }

    let cos_n = scale_signal(&signals.iter().map(|s| s.cosine).collect::<Vec<_>>());
    let rbo_n = scale_signal(&signals.iter().map(|s| s.rbo).collect::<Vec<_>>());
    let edges = kept
        .iter()
        .zip(cos_n.iter().zip(&rbo_n))
        .map(|(&(u, v), (c, r))| Edge {
            u,
            v,
            weight: (c * r).sqrt().max(MIN_EDGE_WEIGHT),
        })
        .collect();

    Ok(PromptGraph {
        node_count: nodes.len(),
        edges,
        signals,
        zero_norm_nodes,
    })
}
