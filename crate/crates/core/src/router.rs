//! Mixture-of-experts quality estimator.
//!
//! A shared trunk maps the prompt embedding through a projection `P_r` and
//! looks up a learned embedding per model. Each model has a general head; each
//! (task, candidate model) pair has a task-specific head. Estimation runs one
//! head per model: task heads for the assigned task's candidates, general
//! heads for everything else.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifact::Artifact;
use crate::classifier::{classify, ClassifierParams, TaskAssignment};
use crate::discovery::DiscoveryResult;
use crate::error::{Error, Result};
use crate::neural::{
    batch_orders, check_finite, train, Adam, FrozenMask, Matrix, Mlp, MlpGrad, MlpOptimizer,
    TrainReport, TrainSpec,
};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAdapter {
    pub task_id: usize,
    pub model: usize,
    pub head: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    /// `d_r x d_p`.
    pub projection: Matrix,
    /// One row per model, `n x d_e`.
    pub model_embeddings: Matrix,
    pub general: Vec<Mlp>,
    /// Sorted by `(task_id, model)`.
    pub task_adapters: Vec<TaskAdapter>,
}

impl Artifact for RouterParams {
    const KIND: [u8; 4] = *b"ROUT";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    General,
    TaskSpecific,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityEstimate {
    pub scores: Vec<f64>,
    pub provenance: Vec<Provenance>,
    /// Heads evaluated; always the pool size.
    pub head_calls: usize,
}

/// Trunk and head sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouterDims {
    pub prompt_dim: usize,
    pub proj_dim: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
}

impl RouterParams {
    pub fn pool_size(&self) -> usize {
        self.general.len()
    }

    pub fn prompt_dim(&self) -> usize {
        self.projection.cols
    }

    pub fn adapter(&self, task_id: usize, model: usize) -> Option<&Mlp> {
        self.task_adapters
            .binary_search_by_key(&(task_id, model), |a| (a.task_id, a.model))
            .ok()
            .map(|i| &self.task_adapters[i].head)
    }

    pub fn has_task(&self, task_id: usize) -> bool {
        self.task_adapters.iter().any(|a| a.task_id == task_id)
    }

    /// Head input for model `m`: `concat(P_r e, E[m])`.
    pub fn head_input(&self, projected: &[f64], model: usize) -> Vec<f64> {
        let mut x = projected.to_vec();
        x.extend_from_slice(self.model_embeddings.row(model));
        x
    }

    fn check(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.prompt_dim() {
            return Err(Error::dim("router prompt embedding", self.prompt_dim(), e.len()));
        }
        Ok(())
    }
}

/// Random trunk and general heads; task adapters for every (task, candidate)
/// pair start as copies of the general heads.
pub fn init_router(pool_size: usize, result: &DiscoveryResult, dims: RouterDims, seed: u64) -> Result<RouterParams> {
    if pool_size == 0 {
        return Err(Error::invalid("router needs a nonempty pool"));
    }
    if result.pool_size() != pool_size {
        return Err(Error::dim("discovery pool", pool_size, result.pool_size()));
    }
    let projection = Matrix::glorot(dims.proj_dim, dims.prompt_dim, &mut seeded_rng(seed, "router/projection"));
    let model_embeddings = Matrix::glorot(pool_size, dims.model_dim, &mut seeded_rng(seed, "router/models"));
    let general: Vec<Mlp> = (0..pool_size)
        .map(|m| {
            let mut rng = seeded_rng(seed, &format!("router/general/{m}"));
            Mlp::init(dims.proj_dim + dims.model_dim, dims.hidden_dim, &mut rng)
        })
        .collect();
    let mut task_adapters = Vec::new();
    for c in &result.clusters {
        let mut cands = c.candidates.clone();
        cands.sort_unstable();
        for m in cands {
            if m >= pool_size {
                return Err(Error::invalid(format!("task {} names model {m} outside the pool", c.task_id)));
            }
            task_adapters.push(TaskAdapter {
                task_id: c.task_id,
                model: m,
                head: general[m].clone(),
            });
        }
    }
    task_adapters.sort_by_key(|a| (a.task_id, a.model));
    Ok(RouterParams {
        projection,
        model_embeddings,
        general,
        task_adapters,
    })
}

/// Quality estimate for every model under `assignment`. A task id the router
/// has no adapters for falls back to the general heads.
pub fn estimate(params: &RouterParams, embedding: &[f64], assignment: &TaskAssignment) -> Result<QualityEstimate> {
    params.check(embedding)?;
    let task = match assignment.task_id {
        Some(t) if !params.has_task(t) => {
            log::warn!("task {t} has no adapters; using general heads");
            None
        }
        other => other,
    };
    let projected = params.projection.matvec(embedding);
    let n = params.pool_size();
    let mut scores = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    let mut head_calls = 0;
    for m in 0..n {
        let x = params.head_input(&projected, m);
        let (head, tag) = match task.and_then(|t| params.adapter(t, m)) {
            Some(h) => (h, Provenance::TaskSpecific),
            None => (&params.general[m], Provenance::General),
        };
        scores.push(head.forward_unchecked(&x));
        provenance.push(tag);
        head_calls += 1;
    }
    Ok(QualityEstimate {
        scores,
        provenance,
        head_calls,
    })
}

/// Gradient of the base-model loss for one prompt.
#[derive(Debug, Clone)]
pub struct BaseGrad {
    pub projection: Matrix,
    pub model_embeddings: Matrix,
    pub general: Vec<MlpGrad>,
}

impl BaseGrad {
    fn zeros(p: &RouterParams) -> Self {
        BaseGrad {
            projection: Matrix::zeros(p.projection.rows, p.projection.cols),
            model_embeddings: Matrix::zeros(p.model_embeddings.rows, p.model_embeddings.cols),
            general: p.general.iter().map(MlpGrad::zeros_like).collect(),
        }
    }

    fn add_scaled(&mut self, o: &BaseGrad, s: f64) {
        for (a, b) in self.projection.data.iter_mut().zip(&o.projection.data) {
            *a += s * b;
        }
        for (a, b) in self.model_embeddings.data.iter_mut().zip(&o.model_embeddings.data) {
            *a += s * b;
        }
        for (a, b) in self.general.iter_mut().zip(&o.general) {
            a.add_scaled(b, s);
        }
    }

    /// Entries in [`base_flat`] order.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.projection.data.clone();
        v.extend_from_slice(&self.model_embeddings.data);
        for g in &self.general {
            v.extend(g.flat());
        }
        v
    }
}

/// Trunk and general-head parameters as one vector.
pub fn base_flat(p: &RouterParams) -> Vec<f64> {
    let mut v = p.projection.data.clone();
    v.extend_from_slice(&p.model_embeddings.data);
    for h in &p.general {
        v.extend(h.flat());
    }
    v
}

pub fn set_base_flat(p: &mut RouterParams, v: &[f64]) {
    let (a, rest) = v.split_at(p.projection.data.len());
    let (b, mut rest) = rest.split_at(p.model_embeddings.data.len());
    p.projection.data.copy_from_slice(a);
    p.model_embeddings.data.copy_from_slice(b);
    for h in &mut p.general {
        let (c, r) = rest.split_at(h.param_count());
        h.set_flat(c);
        rest = r;
    }
}

/// Mean over models of `(general_m(x_m) - quality[m])^2` and its gradient.
pub fn base_loss_grad(p: &RouterParams, e: &[f64], quality: &[f64]) -> Result<(f64, BaseGrad)> {
    p.check(e)?;
    if quality.len() != p.pool_size() {
        return Err(Error::dim("router quality", p.pool_size(), quality.len()));
    }
    let n = p.pool_size() as f64;
    let d_r = p.projection.rows;
    let projected = p.projection.matvec(e);
    let mut g = BaseGrad::zeros(p);
    let mut dq = vec![0.0; d_r];
    let mut loss = 0.0;
    for (m, head) in p.general.iter().enumerate() {
        let x = p.head_input(&projected, m);
        let t = quality[m];
        let (out, hg, dx) = head.backward(&x, |o| 2.0 * (o - t) / n);
        loss += (out - t).powi(2) / n;
        g.general[m] = hg;
        for (a, b) in dq.iter_mut().zip(&dx[..d_r]) {
            *a += b;
        }
        for (a, b) in g.model_embeddings.row_mut(m).iter_mut().zip(&dx[d_r..]) {
            *a += b;
        }
    }
    g.projection.add_outer(&dq, e);
    Ok((loss, g))
}

fn base_loss(p: &RouterParams, data: &[(&[f64], &[f64])]) -> Result<f64> {
    let mut total = 0.0;
    for (e, q) in data {
        total += base_loss_grad(p, e, q)?.0;
    }
    Ok(total / data.len() as f64)
}

/// Phase one: trunk and general heads on every (prompt, model) pair. Task
/// adapters are left as they are.
pub fn train_base(params: &RouterParams, data: &[(&[f64], &[f64])], spec: &TrainSpec) -> Result<(RouterParams, TrainReport)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("router training set is empty"));
    }
    let mut p = params.clone();
    let mut opt_proj = Adam::new(p.projection.data.len(), spec.learning_rate);
    let mut opt_emb = Adam::new(p.model_embeddings.data.len(), spec.learning_rate);
    let mut opt_heads: Vec<MlpOptimizer> = p
        .general
        .iter()
        .map(|h| MlpOptimizer::new(h, spec.learning_rate, FrozenMask::NONE))
        .collect();
    let initial_loss = base_loss(&p, data)?;
    check_finite(initial_loss, "router base", 0)?;
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    for (epoch, order) in batch_orders(data.len(), spec).enumerate() {
        for batch in order.chunks(spec.batch_size) {
            let mut g = BaseGrad::zeros(&p);
            for &i in batch {
                let (_, gi) = base_loss_grad(&p, data[i].0, data[i].1)?;
                g.add_scaled(&gi, 1.0 / batch.len() as f64);
            }
            opt_proj.step(&mut p.projection.data, &g.projection.data);
            opt_emb.step(&mut p.model_embeddings.data, &g.model_embeddings.data);
            for ((h, o), hg) in p.general.iter_mut().zip(&mut opt_heads).zip(&g.general) {
                o.step(h, hg);
            }
        }
        let loss = base_loss(&p, data)?;
        check_finite(loss, "router base", epoch + 1)?;
        epoch_losses.push(loss);
    }
    Ok((
        p,
        TrainReport {
            initial_loss,
            epoch_losses,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterReport {
    /// Relabeled record count per task id; index `len` holds the unassigned.
    pub task_counts: Vec<usize>,
    pub unassigned: usize,
    pub untrained: Vec<(usize, usize)>,
    pub losses: Vec<((usize, usize), TrainReport)>,
}

impl AdapterReport {
    pub fn render(&self, base: Option<&TrainReport>) -> String {
        let mut out = String::new();
        if let Some(b) = base {
            let _ = writeln!(out, "base initial mse {:.6}", b.initial_loss);
            for (i, l) in b.epoch_losses.iter().enumerate() {
                let _ = writeln!(out, "base epoch {} mse {:.6}", i + 1, l);
            }
        }
        for (t, c) in self.task_counts.iter().enumerate() {
            let _ = writeln!(out, "task {t} relabeled records {c}");
        }
        let _ = writeln!(out, "unassigned records {}", self.unassigned);
        for ((t, m), r) in &self.losses {
            let _ = writeln!(out, "adapter ({t}, {m}) mse {:.6} -> {:.6}", r.initial_loss, r.final_loss());
        }
        for (t, m) in &self.untrained {
            let _ = writeln!(out, "adapter ({t}, {m}) untrained: no relabeled records");
        }
        out
    }
}

/// Phase two: relabel prompts with the classifier, clone each task adapter
/// from its model's general head, and fit it on that task's prompts only.
/// The trunk and general heads are not touched.
pub fn train_task_adapters(
    params: &RouterParams,
    data: &[(&[f64], &[f64])],
    clf: &ClassifierParams,
    theta: f64,
    spec: &TrainSpec,
) -> Result<(RouterParams, AdapterReport)> {
    spec.validate()?;
    let mut p = params.clone();
    let task_count = p.task_adapters.iter().map(|a| a.task_id + 1).max().unwrap_or(0);
    let mut by_task: Vec<Vec<usize>> = vec![Vec::new(); task_count];
    let mut unassigned = 0;
    let mut projected = Vec::with_capacity(data.len());
    for (i, (e, q)) in data.iter().enumerate() {
        p.check(e)?;
        if q.len() != p.pool_size() {
            return Err(Error::dim("router quality", p.pool_size(), q.len()));
        }
        projected.push(p.projection.matvec(e));
        match classify(clf, e, theta)?.task_id {
            Some(t) if t < task_count => by_task[t].push(i),
            _ => unassigned += 1,
        }
    }
    let mut untrained = Vec::new();
    let mut losses = Vec::new();
    for a in &mut p.task_adapters {
        a.head = params.general[a.model].clone();
        let members = &by_task[a.task_id];
        if members.is_empty() {
            untrained.push((a.task_id, a.model));
            continue;
        }
        let set: Vec<(Vec<f64>, f64)> = members
            .iter()
            .map(|&i| {
                let x = params.head_input(&projected[i], a.model);
                (x, data[i].1[a.model])
            })
            .collect();
        let s = spec.derived(&format!("adapter/{}/{}", a.task_id, a.model));
        let (head, report) = train(&a.head, &set, &s, FrozenMask::NONE)?;
        a.head = head;
        losses.push(((a.task_id, a.model), report));
    }
    Ok((
        p,
        AdapterReport {
            task_counts: by_task.iter().map(Vec::len).collect(),
            unassigned,
            untrained,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::TaskCluster;
    use crate::neural::{central_difference, logistic, max_relative_error};
    use crate::rank::RankedList;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::{BTreeMap, BTreeSet};

    fn discovery(n: usize, cands: &[Vec<usize>]) -> DiscoveryResult {
        DiscoveryResult {
            clusters: cands
                .iter()
                .enumerate()
                .map(|(i, c)| TaskCluster {
                    task_id: i,
                    member_prompt_ids: vec![],
                    center: vec![0.0; 2],
                    fused_list: RankedList::new((0..n).collect()).unwrap(),
                    median_quality: vec![0.5; n],
                    candidates: c.clone(),
                    description_embedding: vec![0.0; 2],
                })
                .collect(),
            others_median_quality: vec![0.5; n],
            assignment: BTreeMap::new(),
        }
    }

    fn dims(prompt_dim: usize) -> RouterDims {
        RouterDims {
            prompt_dim,
            proj_dim: 3,
            model_dim: 2,
            hidden_dim: 5,
        }
    }

    fn assigned(t: Option<usize>) -> TaskAssignment {
        TaskAssignment {
            task_id: t,
            score: 1.0,
            all_scores: vec![],
        }
    }

    fn spec(epochs: usize, lr: f64) -> TrainSpec {
        TrainSpec {
            learning_rate: lr,
            epochs,
            batch_size: 8,
            seed: 5,
            shuffle: true,
        }
    }

    #[test]
    fn adapter_counts_and_keys() {
        let d = discovery(4, &[vec![2], vec![0, 3], vec![1, 2, 3]]);
        let p = init_router(4, &d, dims(2), 0).unwrap();
        assert_eq!(p.task_adapters.len(), 6);
        assert_eq!(p.general.len(), 4);
        let keys: BTreeSet<(usize, usize)> = p.task_adapters.iter().map(|a| (a.task_id, a.model)).collect();
        let expected: BTreeSet<(usize, usize)> = d
            .clusters
            .iter()
            .flat_map(|c| c.candidates.iter().map(move |&m| (c.task_id, m)))
            .collect();
        assert_eq!(keys, expected);
    }

    #[test]
    fn provenance_follows_assignment() {
        let d = discovery(6, &[vec![0], vec![2, 5]]);
        let p = init_router(6, &d, dims(2), 1).unwrap();
        let e = [0.3, -0.8];
        let none = estimate(&p, &e, &assigned(None)).unwrap();
        assert!(none.provenance.iter().all(|t| *t == Provenance::General));
        let one = estimate(&p, &e, &assigned(Some(1))).unwrap();
        let specific: Vec<usize> = (0..6).filter(|&m| one.provenance[m] == Provenance::TaskSpecific).collect();
        assert_eq!(specific, vec![2, 5]);
        assert_eq!(one.head_calls, 6);
        let unknown = estimate(&p, &e, &assigned(Some(9))).unwrap();
        assert!(unknown.provenance.iter().all(|t| *t == Provenance::General));
        assert!(estimate(&p, &[1.0], &assigned(None)).is_err());
    }

    /// Independent evaluation of every head with explicit loops.
    #[test]
    fn estimate_matches_straight_line_oracle() {
        let d = discovery(3, &[vec![1]]);
        let mut p = init_router(3, &d, dims(2), 7).unwrap();
        p.task_adapters[0].head.b2 = 0.4;
        let e = [0.6, -0.1];
        let est = estimate(&p, &e, &assigned(Some(0))).unwrap();
        for m in 0..3 {
            let mut x = Vec::new();
            for r in 0..3 {
                x.push(p.projection.data[r * 2] * e[0] + p.projection.data[r * 2 + 1] * e[1]);
            }
            x.extend_from_slice(&p.model_embeddings.data[m * 2..m * 2 + 2]);
            let h = if m == 1 { &p.task_adapters[0].head } else { &p.general[m] };
            let mut z = h.b2;
            for k in 0..h.hidden_dim() {
                let mut a = h.b1[k];
                for (i, xi) in x.iter().enumerate() {
                    a += h.w1.data[k * x.len() + i] * xi;
                }
                z += h.w2[k] * a.max(0.0);
            }
            assert!((est.scores[m] - logistic(z)).abs() < 1e-14);
        }
    }

    fn planted(n_per: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut embs = Vec::new();
        let mut qs = Vec::new();
        for t in 0..2 {
            for _ in 0..n_per {
                let c = if t == 0 { [3.0, 0.0] } else { [0.0, 3.0] };
                embs.push(vec![c[0] + rng.random_range(-0.3..0.3), c[1] + rng.random_range(-0.3..0.3)]);
                qs.push(if t == 0 { vec![0.9, 0.6] } else { vec![0.2, 0.6] });
            }
        }
        (embs, qs)
    }

    #[test]
    fn base_training_learns_constant_and_task_signal() {
        let (embs, qs) = planted(30);
        let data: Vec<(&[f64], &[f64])> = embs.iter().map(|e| e.as_slice()).zip(qs.iter().map(|q| q.as_slice())).collect();
        let d = discovery(2, &[vec![0]]);
        let init = init_router(2, &d, dims(2), 3).unwrap();
        let (p, report) = train_base(&init, &data, &spec(150, 1e-2)).unwrap();
        assert!(report.final_loss() <= report.initial_loss);
        let pred = |m: usize, e: &[f64]| estimate(&p, e, &assigned(None)).unwrap().scores[m];
        for e in &embs {
            assert!((pred(1, e) - 0.6).abs() <= 0.05);
        }
        let mean = |range: std::ops::Range<usize>| range.clone().map(|i| pred(0, &embs[i])).sum::<f64>() / range.len() as f64;
        assert!(mean(0..30) > mean(30..60));
        assert_eq!(p.task_adapters, init.task_adapters);
    }

    #[test]
    fn zero_epoch_base_is_unchanged() {
        let (embs, qs) = planted(4);
        let data: Vec<(&[f64], &[f64])> = embs.iter().map(|e| e.as_slice()).zip(qs.iter().map(|q| q.as_slice())).collect();
        let init = init_router(2, &discovery(2, &[vec![0]]), dims(2), 3).unwrap();
        let (p, _) = train_base(&init, &data, &spec(0, 1e-2)).unwrap();
        assert_eq!(p, init);
    }

    fn classifier_for_two_regions() -> ClassifierParams {
        // logit_0 = 4 (x - y), only task 0
        ClassifierParams {
            projection: Matrix {
                rows: 1,
                cols: 2,
                data: vec![1.0, -1.0],
            },
            tasks: Matrix {
                rows: 1,
                cols: 1,
                data: vec![4.0],
            },
            bias: vec![0.0],
        }
    }

    #[test]
    fn adapters_freeze_trunk_and_fit_task_constant() {
        let (embs, qs) = planted(30);
        let data: Vec<(&[f64], &[f64])> = embs.iter().map(|e| e.as_slice()).zip(qs.iter().map(|q| q.as_slice())).collect();
        let d = discovery(2, &[vec![0, 1]]);
        let init = init_router(2, &d, dims(2), 4).unwrap();
        let (base, _) = train_base(&init, &data, &spec(5, 1e-2)).unwrap();
        let (p, report) = train_task_adapters(&base, &data, &classifier_for_two_regions(), 0.5, &spec(200, 1e-2)).unwrap();
        assert_eq!(p.projection, base.projection);
        assert_eq!(p.model_embeddings, base.model_embeddings);
        assert_eq!(p.general, base.general);
        assert_eq!(report.task_counts, vec![30]);
        assert_eq!(report.unassigned, 30);
        for e in &embs[..30] {
            let est = estimate(&p, e, &assigned(Some(0))).unwrap();
            assert!((est.scores[0] - 0.9).abs() <= 0.05, "{}", est.scores[0]);
        }
    }

    #[test]
    fn task_without_records_keeps_cloned_heads() {
        let (embs, qs) = planted(5);
        let data: Vec<(&[f64], &[f64])> = embs.iter().map(|e| e.as_slice()).zip(qs.iter().map(|q| q.as_slice())).collect();
        let d = discovery(2, &[vec![0], vec![1]]);
        let base = init_router(2, &d, dims(2), 4).unwrap();
        let (p, report) = train_task_adapters(&base, &data, &classifier_for_two_regions(), 0.5, &spec(3, 1e-2)).unwrap();
        assert_eq!(report.untrained, vec![(1, 1)]);
        assert_eq!(p.adapter(1, 1).unwrap(), &base.general[1]);
        assert!(report.render(None).contains("adapter (1, 1) untrained"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn base_gradient_matches_finite_differences(seed in 0u64..10_000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = init_router(3, &discovery(3, &[vec![0]]), dims(4), seed).unwrap();
            let e: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let (_, g) = base_loss_grad(&p, &e, &q).unwrap();
            let f = |theta: &[f64]| {
                let mut probe = p.clone();
                set_base_flat(&mut probe, theta);
                base_loss_grad(&probe, &e, &q).unwrap().0
            };
            let numeric = central_difference(f, &base_flat(&p), 1e-5);
            prop_assert!(max_relative_error(&g.flat(), &numeric, 1e-6) <= 1e-4);
        }

        #[test]
        fn estimates_are_probabilities(seed in 0u64..1000, x in -5.0f64..5.0) {
            let p = init_router(4, &discovery(4, &[vec![1, 2]]), dims(2), seed).unwrap();
            let est = estimate(&p, &[x, -x], &assigned(Some(0))).unwrap();
            prop_assert!(est.scores.iter().all(|s| *s > 0.0 && *s < 1.0));
            prop_assert_eq!(est.head_calls, 4);
        }
    }
}
