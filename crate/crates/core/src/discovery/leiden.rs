//! Leiden community detection on weighted undirected graphs.
//!
//! Each pass runs fast local moving, refines every community into
//! well-connected sub-communities, aggregates the refined partition into a
//! quotient graph seeded with the unrefined partition, and repeats on the
//! quotient until no aggregation is possible. Passes repeat until a full
//! pass moves no node.

use std::collections::{BTreeMap, VecDeque};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::graph::PromptGraph;
use crate::error::{Error, Result};
use crate::seeded_rng;

const MAX_PASSES: usize = 32;
const GAIN_EPS: f64 = 1e-12;

/// Weighted graph with self-loops, as seen by one aggregation level.
#[derive(Debug, Clone)]
struct Net {
    adj: Vec<Vec<(usize, f64)>>,
    /// Weight of each node's self-loop, counted once.
    self_w: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

impl Net {
    fn from_graph(g: &PromptGraph) -> Result<Net> {
        let n = g.node_count;
        let mut adj = vec![Vec::new(); n];
        for e in &g.edges {
            if e.u >= e.v || e.v >= n || !(e.weight.is_finite() && e.weight > 0.0) {
                return Err(Error::invalid(format!("malformed edge {e:?}")));
            }
            adj[e.u].push((e.v, e.weight));
            adj[e.v].push((e.u, e.weight));
        }
        Ok(Net::finish(adj, vec![0.0; n]))
    }

    fn finish(mut adj: Vec<Vec<(usize, f64)>>, self_w: Vec<f64>) -> Net {
        for list in &mut adj {
            list.sort_by_key(|&(j, _)| j);
        }
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_w)
            .map(|(list, s)| 2.0 * s + list.iter().map(|&(_, w)| w).sum::<f64>())
            .collect();
        let two_m = degree.iter().sum();
        Net {
            adj,
            self_w,
            degree,
            two_m,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, comm: &[usize], gamma: f64) -> f64 {
        if self.two_m == 0.0 {
            return 0.0;
        }
        let mut inside: BTreeMap<usize, f64> = BTreeMap::new();
        let mut tot: BTreeMap<usize, f64> = BTreeMap::new();
        for i in 0..self.len() {
            let c = comm[i];
            let mut w_in = 2.0 * self.self_w[i];
            for &(j, w) in &self.adj[i] {
                if comm[j] == c {
                    w_in += w;
                }
            }
            *inside.entry(c).or_default() += w_in;
            *tot.entry(c).or_default() += self.degree[i];
        }
        inside
            .iter()
            .map(|(c, w_in)| {
                let t = tot[c] / self.two_m;
                w_in / self.two_m - gamma * t * t
            })
            .sum()
    }
}

/// Weighted modularity of `partition` at resolution `gamma`. A graph with no
/// edges has modularity 0.
pub fn modularity(g: &PromptGraph, partition: &[usize], gamma: f64) -> Result<f64> {
    if partition.len() != g.node_count {
        return Err(Error::dim("partition", g.node_count, partition.len()));
    }
    Ok(Net::from_graph(g)?.modularity(partition, gamma))
}

/// Scratch buffer summing edge weight per neighboring community.
struct Tally {
    weight: Vec<f64>,
    touched: Vec<usize>,
}

impl Tally {
    fn new(n: usize) -> Self {
        Tally {
            weight: vec![0.0; n],
            touched: Vec::new(),
        }
    }

    fn add(&mut self, c: usize, w: f64) {
        if self.weight[c] == 0.0 && !self.touched.contains(&c) {
            self.touched.push(c);
        }
        self.weight[c] += w;
    }

    fn clear(&mut self) {
        for &c in &self.touched {
            self.weight[c] = 0.0;
        }
        self.touched.clear();
    }
}

/// Queue-based local moving. Returns whether any node changed community.
fn local_move(
    net: &Net,
    comm: &mut [usize],
    gamma: f64,
    rng: &mut ChaCha8Rng,
    trace: &mut Option<&mut Vec<f64>>,
) -> bool {
    let n = net.len();
    if net.two_m == 0.0 {
        return false;
    }
    let mut tot = vec![0.0; n];
    let mut size = vec![0usize; n];
    for i in 0..n {
        tot[comm[i]] += net.degree[i];
        size[comm[i]] += 1;
    }
    let mut empty: Vec<usize> = (0..n).rev().filter(|&c| size[c] == 0).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut queue: VecDeque<usize> = order.into();
    let mut queued = vec![true; n];
    let mut tally = Tally::new(n);
    let mut moved = false;
    let scale = gamma / net.two_m;

    while let Some(i) = queue.pop_front() {
        queued[i] = false;
        let old = comm[i];
        let ki = net.degree[i];
        for &(j, w) in &net.adj[i] {
            tally.add(comm[j], w);
        }
        tot[old] -= ki;
        size[old] -= 1;

        let mut best = old;
        let mut best_gain = tally.weight[old] - scale * ki * tot[old];
        tally.touched.sort_unstable();
        for &c in &tally.touched {
            let gain = tally.weight[c] - scale * ki * tot[c];
            if gain > best_gain + GAIN_EPS {
                best = c;
                best_gain = gain;
            }
        }
        if size[old] > 0 && 0.0 > best_gain + GAIN_EPS {
            best = *empty.last().expect("a community id is free while `old` is shared");
        }
        tally.clear();

        if best != old && size[best] == 0 {
            empty.pop();
        }
        if size[old] == 0 && best != old {
            empty.push(old);
        }
        comm[i] = best;
        tot[best] += ki;
        size[best] += 1;

        if best != old {
            moved = true;
            if let Some(t) = trace.as_deref_mut() {
                t.push(net.modularity(comm, gamma));
            }
            for &(j, _) in &net.adj[i] {
                if comm[j] != best && !queued[j] {
                    queued[j] = true;
                    queue.push_back(j);
                }
            }
        }
    }
    moved
}

/// Splits each community into well-connected sub-communities by greedily
/// merging singletons. Merges stay within their community.
fn refine(net: &Net, comm: &[usize], gamma: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = net.len();
    let scale = gamma / net.two_m;
    let mut ctot = vec![0.0; n];
    for i in 0..n {
        ctot[comm[i]] += net.degree[i];
    }
    let mut refined: Vec<usize> = (0..n).collect();
    let mut rtot = net.degree.clone();
    let mut rsize = vec![1usize; n];
    // weight from each refined community to the rest of its community
    let mut ext: Vec<f64> = (0..n)
        .map(|i| {
            net.adj[i]
                .iter()
                .filter(|&&(j, _)| comm[j] == comm[i])
                .map(|&(_, w)| w)
                .sum()
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut tally = Tally::new(n);
    for i in order {
        if rsize[refined[i]] != 1 {
            continue;
        }
        let c = comm[i];
        let ki = net.degree[i];
        if ext[i] < scale * ki * (ctot[c] - ki) {
            continue;
        }
        for &(j, w) in &net.adj[i] {
            if comm[j] == c {
                tally.add(refined[j], w);
            }
        }
        let mut best = None;
        let mut best_gain = 0.0;
        tally.touched.sort_unstable();
        for &r in &tally.touched {
            if r == refined[i] || ext[r] < scale * rtot[r] * (ctot[c] - rtot[r]) {
                continue;
            }
            let gain = tally.weight[r] - scale * ki * rtot[r];
            if gain > best_gain + GAIN_EPS {
                best = Some(r);
                best_gain = gain;
            }
        }
        if let Some(r) = best {
            let own = refined[i];
            ext[r] += ext[own] - 2.0 * tally.weight[r];
            rtot[r] += ki;
            rsize[r] += 1;
            rsize[own] = 0;
            refined[i] = r;
        }
        tally.clear();
    }
    refined
}

/// Relabels `labels` to `0..k` in order of first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Quotient graph over `groups` (already compact).
fn aggregate(net: &Net, groups: &[usize], count: usize) -> Net {
    let mut self_w = vec![0.0; count];
    let mut pair: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for i in 0..net.len() {
        let a = groups[i];
        self_w[a] += net.self_w[i];
        for &(j, w) in &net.adj[i] {
            if j <= i {
                continue;
            }
            let b = groups[j];
            if a == b {
                self_w[a] += w;
            } else {
                *pair.entry((a.min(b), a.max(b))).or_default() += w;
            }
        }
    }
    let mut adj = vec![Vec::new(); count];
    for ((a, b), w) in pair {
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    Net::finish(adj, self_w)
}

/// Splits every community into its connected components on the base graph.
fn split_disconnected(net: &Net, membership: &[usize]) -> Vec<usize> {
    let n = net.len();
    let mut out = vec![usize::MAX; n];
    let mut next = 0;
    for start in 0..n {
        if out[start] != usize::MAX {
            continue;
        }
        out[start] = next;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &(j, _) in &net.adj[i] {
                if out[j] == usize::MAX && membership[j] == membership[start] {
                    out[j] = next;
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    out
}

fn run(g: &PromptGraph, gamma: f64, seed: u64, mut trace: Option<&mut Vec<f64>>) -> Result<Vec<usize>> {
    if g.node_count == 0 {
        return Err(Error::invalid("cannot partition an empty graph"));
    }
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::invalid(format!("resolution {gamma} must be positive")));
    }
    let base = Net::from_graph(g)?;
    let n = base.len();
    let mut rng = seeded_rng(seed, "leiden");
    let mut membership: Vec<usize> = (0..n).collect();

    for _ in 0..MAX_PASSES {
        let mut net = base.clone();
        let mut node_of: Vec<usize> = (0..n).collect();
        let mut comm = membership.clone();
        let mut any_move = false;
        loop {
            any_move |= local_move(&net, &mut comm, gamma, &mut rng, &mut trace);
            for (m, &v) in membership.iter_mut().zip(&node_of) {
                *m = comm[v];
            }
            let (comm_ids, comm_count) = compact(&comm);
            if comm_count == net.len() {
                break;
            }
            let refined = refine(&net, &comm, gamma, &mut rng);
            let (mut groups, mut count) = compact(&refined);
            if count == net.len() {
                groups = comm_ids.clone();
                count = comm_count;
            }
            let mut next_comm = vec![0; count];
            for v in 0..net.len() {
                next_comm[groups[v]] = comm_ids[v];
            }
            net = aggregate(&net, &groups, count);
            for v in &mut node_of {
                *v = groups[*v];
            }
            comm = next_comm;
        }
        if !any_move {
            break;
        }
    }
    let parts = split_disconnected(&base, &membership);
    if let Some(t) = trace.as_deref_mut() {
        t.push(base.modularity(&parts, gamma));
    }
    Ok(parts)
}

/// Community per node, labeled `0..k` in order of each community's lowest
/// node. Deterministic for a fixed seed.
pub fn leiden_partition(g: &PromptGraph, resolution: f64, seed: u64) -> Result<Vec<usize>> {
    run(g, resolution, seed, None)
}

/// As [`leiden_partition`], also returning the modularity after every
/// accepted move and, last, of the final partition.
pub fn leiden_traced(g: &PromptGraph, resolution: f64, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut trace = Vec::new();
    let parts = run(g, resolution, seed, Some(&mut trace))?;
    Ok((parts, trace))
}
