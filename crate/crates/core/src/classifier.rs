//! Bilinear task classifier: `score_j = logistic((P e) . T_j + b_j)`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifact::Artifact;
use crate::discovery::DiscoveryResult;
use crate::error::{Error, Result};
use crate::neural::{batch_orders, check_finite, dot, logistic, Adam, Matrix, TrainReport, TrainSpec};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// Prompt projection, `d_model x d_p`.
    pub projection: Matrix,
    /// Task encodings, one row per task id.
    pub tasks: Matrix,
    pub bias: Vec<f64>,
}

impl Artifact for ClassifierParams {
    const KIND: [u8; 4] = *b"CLSF";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub task_id: Option<usize>,
    pub score: f64,
    pub all_scores: Vec<f64>,
}

impl TaskAssignment {
    pub fn none() -> Self {
        TaskAssignment {
            task_id: None,
            score: 0.0,
            all_scores: Vec::new(),
        }
    }
}

/// Reads `{task_id, embedding}` lines.
pub fn load_description_embeddings(path: &Path) -> Result<BTreeMap<usize, Vec<f64>>> {
    #[derive(Deserialize)]
    struct Line {
        task_id: usize,
        embedding: Vec<f64>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: Line = serde_json::from_str(raw).map_err(|e| Error::Record {
            path: path.into(),
            line: i + 1,
            field: "task description".into(),
            message: e.to_string(),
        })?;
        out.insert(line.task_id, line.embedding);
    }
    Ok(out)
}

impl ClassifierParams {
    pub fn task_count(&self) -> usize {
        self.tasks.rows
    }

    pub fn model_dim(&self) -> usize {
        self.projection.rows
    }

    pub fn prompt_dim(&self) -> usize {
        self.projection.cols
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.projection.data.clone();
        v.extend_from_slice(&self.tasks.data);
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let (p, rest) = v.split_at(self.projection.data.len());
        let (t, b) = rest.split_at(self.tasks.data.len());
        self.projection.data.copy_from_slice(p);
        self.tasks.data.copy_from_slice(t);
        self.bias.copy_from_slice(b);
    }

    fn logits(&self, e: &[f64]) -> Vec<f64> {
        let q = self.projection.matvec(e);
        (0..self.task_count())
            .map(|j| dot(&q, self.tasks.row(j)) + self.bias[j])
            .collect()
    }

    /// Mean binary cross-entropy over tasks for one prompt and its
    /// gradient in [`ClassifierParams::flat`] order.
    pub fn loss_grad(&self, e: &[f64], label: Option<usize>) -> Result<(f64, Vec<f64>)> {
        self.check(e)?;
        let k = self.task_count();
        let q = self.projection.matvec(e);
        let mut loss = 0.0;
        let mut dz = vec![0.0; k];
        for j in 0..k {
            let z = dot(&q, self.tasks.row(j)) + self.bias[j];
            let y = if label == Some(j) { 1.0 } else { 0.0 };
            loss += bce_with_logit(z, y);
            dz[j] = (logistic(z) - y) / k as f64;
        }
        let mut dp = Matrix::zeros(self.projection.rows, self.projection.cols);
        let mut dt = Matrix::zeros(self.tasks.rows, self.tasks.cols);
        dt.add_outer(&dz, &q);
        let dq = self.tasks.t_matvec(&dz);
        dp.add_outer(&dq, e);
        let mut g = dp.data;
        g.extend_from_slice(&dt.data);
        g.extend_from_slice(&dz);
        Ok((loss / k as f64, g))
    }

    fn check(&self, e: &[f64]) -> Result<()> {
        if e.len() != self.prompt_dim() {
            return Err(Error::dim("classifier prompt embedding", self.prompt_dim(), e.len()));
        }
        Ok(())
    }
}

/// `-(y log s + (1-y) log(1-s))` with `s = logistic(z)`, computed stably.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Builds the classifier for the discovered tasks. Task rows start from each
/// cluster's description embedding (or an external one from `overrides`),
/// truncated or zero-padded to `d_model`. A `d_model` of 0 means "the
/// description dimension".
pub fn init_classifier(
    result: &DiscoveryResult,
    prompt_dim: usize,
    d_model: usize,
    overrides: Option<&BTreeMap<usize, Vec<f64>>>,
    seed: u64,
) -> Result<ClassifierParams> {
    if result.clusters.is_empty() {
        return Err(Error::invalid("classifier needs at least one discovered task"));
    }
    let desc = |c: &crate::discovery::TaskCluster| -> Vec<f64> {
        overrides
            .and_then(|o| o.get(&c.task_id).cloned())
            .unwrap_or_else(|| c.description_embedding.clone())
    };
    let d_model = if d_model == 0 {
        desc(&result.clusters[0]).len()
    } else {
        d_model
    };
    let mut tasks = Matrix::zeros(result.clusters.len(), d_model);
    for (j, c) in result.clusters.iter().enumerate() {
        let d = desc(c);
        for (dst, src) in tasks.row_mut(j).iter_mut().zip(&d) {
            *dst = *src;
        }
    }
    let projection = Matrix::glorot(d_model, prompt_dim, &mut seeded_rng(seed, "classifier/init"));
    Ok(ClassifierParams {
        projection,
        tasks,
        bias: vec![0.0; result.clusters.len()],
    })
}

/// Assigns the highest-scoring task when its score reaches `theta`; ties go
/// to the lower task id.
pub fn classify(params: &ClassifierParams, embedding: &[f64], theta: f64) -> Result<TaskAssignment> {
    params.check(embedding)?;
    let all_scores: Vec<f64> = params.logits(embedding).into_iter().map(logistic).collect();
    let mut best = 0;
    for j in 1..all_scores.len() {
        if all_scores[j] > all_scores[best] {
            best = j;
        }
    }
    let score = all_scores[best];
    Ok(TaskAssignment {
        task_id: (score >= theta).then_some(best),
        score,
        all_scores,
    })
}

fn mean_loss(params: &ClassifierParams, data: &[(&[f64], Option<usize>)]) -> Result<f64> {
    let mut total = 0.0;
    for (e, y) in data {
        total += params.loss_grad(e, *y)?.0;
    }
    Ok(total / data.len() as f64)
}

/// Trains on prompts labeled with a task id or `None` (Others).
pub fn train_classifier(
    params: &ClassifierParams,
    data: &[(&[f64], Option<usize>)],
    spec: &TrainSpec,
) -> Result<(ClassifierParams, TrainReport)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("classifier training set is empty"));
    }
    for (e, y) in data {
        params.check(e)?;
        if let Some(t) = y {
            if *t >= params.task_count() {
                return Err(Error::invalid(format!("label {t} has no task row")));
            }
        }
    }
    let mut p = params.clone();
    let mut theta = p.flat();
    let mut opt = Adam::new(theta.len(), spec.learning_rate);
    let initial_loss = mean_loss(&p, data)?;
    check_finite(initial_loss, "classifier", 0)?;
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    for (epoch, order) in batch_orders(data.len(), spec).enumerate() {
        for batch in order.chunks(spec.batch_size) {
            let mut g = vec![0.0; theta.len()];
            for &i in batch {
                let (_, gi) = p.loss_grad(data[i].0, data[i].1)?;
                for (a, b) in g.iter_mut().zip(&gi) {
                    *a += b / batch.len() as f64;
                }
            }
            opt.step(&mut theta, &g);
            p.set_flat(&theta);
        }
        let loss = mean_loss(&p, data)?;
        check_finite(loss, "classifier", epoch + 1)?;
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::TaskCluster;
    use crate::neural::{central_difference, max_relative_error};
    use crate::rank::RankedList;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn result_with(descs: &[Vec<f64>]) -> DiscoveryResult {
        DiscoveryResult {
            clusters: descs
                .iter()
                .enumerate()
                .map(|(i, d)| TaskCluster {
                    task_id: i,
                    member_prompt_ids: vec![format!("p{i}")],
                    center: d.clone(),
                    fused_list: RankedList::new(vec![0, 1]).unwrap(),
                    median_quality: vec![0.5, 0.5],
                    candidates: vec![0],
                    description_embedding: d.clone(),
                })
                .collect(),
            others_median_quality: vec![0.5, 0.5],
            assignment: BTreeMap::new(),
        }
    }

    fn zero_params(tasks: usize, dim: usize) -> ClassifierParams {
        ClassifierParams {
            projection: Matrix::zeros(dim, dim),
            tasks: Matrix::zeros(tasks, dim),
            bias: vec![0.0; tasks],
        }
    }

    fn spec(epochs: usize, lr: f64) -> TrainSpec {
        TrainSpec {
            learning_rate: lr,
            epochs,
            batch_size: 8,
            seed: 3,
            shuffle: true,
        }
    }

    #[test]
    fn init_copies_centers_when_dims_match() {
        let r = result_with(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]);
        let p = init_classifier(&r, 4, 0, None, 0).unwrap();
        assert_eq!(p.tasks.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(p.tasks.row(1), &[-1.0, 0.5, 0.0]);
        assert_eq!(p.bias, vec![0.0, 0.0]);
        assert_eq!((p.projection.rows, p.projection.cols), (3, 4));
        let one = init_classifier(&result_with(&[vec![1.0]]), 1, 0, None, 0).unwrap();
        assert_eq!(one.task_count(), 1);
    }

    #[test]
    fn init_truncates_to_model_dim() {
        let descs = [vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]];
        let p = init_classifier(&result_with(&descs), 4, 2, None, 0).unwrap();
        for (j, d) in descs.iter().enumerate() {
            assert_eq!(p.tasks.row(j), &d[..2]);
        }
    }

    #[test]
    fn init_prefers_external_descriptions() {
        let r = result_with(&[vec![1.0, 1.0], vec![2.0, 2.0]]);
        let ext = BTreeMap::from([(1, vec![9.0, 8.0])]);
        let p = init_classifier(&r, 2, 0, Some(&ext), 0).unwrap();
        assert_eq!(p.tasks.row(0), &[1.0, 1.0]);
        assert_eq!(p.tasks.row(1), &[9.0, 8.0]);
        assert!(init_classifier(&result_with(&[]), 2, 0, None, 0).is_err());
    }

    #[test]
    fn zero_params_tie_to_task_zero_at_the_boundary() {
        let a = classify(&zero_params(3, 2), &[1.0, -1.0], 0.5).unwrap();
        assert_eq!(a.all_scores, vec![0.5; 3]);
        assert_eq!(a.task_id, Some(0));
        let b = classify(&zero_params(3, 2), &[1.0, -1.0], 1.0).unwrap();
        assert_eq!(b.task_id, None);
        assert!(classify(&zero_params(3, 2), &[1.0], 0.5).is_err());
    }

    #[test]
    fn single_task_all_positive_rises_above_point_nine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let embs: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let data: Vec<(&[f64], Option<usize>)> = embs.iter().map(|e| (e.as_slice(), Some(0))).collect();
        let init = init_classifier(&result_with(&[vec![0.1, 0.1, 0.1]]), 3, 0, None, 2).unwrap();
        let (p, report) = train_classifier(&init, &data, &spec(300, 1e-2)).unwrap();
        assert!(report.final_loss() <= report.initial_loss);
        for (e, _) in &data {
            assert!(classify(&p, e, 0.5).unwrap().score > 0.9);
        }
    }

    #[test]
    fn others_only_drives_scores_down() {
        let embs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 / 10.0, 1.0]).collect();
        let data: Vec<(&[f64], Option<usize>)> = embs.iter().map(|e| (e.as_slice(), None)).collect();
        let init = init_classifier(&result_with(&[vec![1.0, 1.0], vec![-1.0, 1.0]]), 2, 0, None, 2).unwrap();
        let (p, _) = train_classifier(&init, &data, &spec(100, 1e-2)).unwrap();
        for (e, _) in &data {
            let a = classify(&p, e, 0.5).unwrap();
            assert!(a.all_scores.iter().all(|s| *s < 0.5));
            assert_eq!(a.task_id, None);
        }
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let init = init_classifier(&result_with(&[vec![1.0, 0.0]]), 2, 0, None, 4).unwrap();
        let e = [0.3, 0.4];
        let (p, _) = train_classifier(&init, &[(&e, Some(0))], &spec(0, 1e-2)).unwrap();
        assert_eq!(p, init);
    }

    #[test]
    fn stable_bce_matches_direct_formula() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-0.7, 1.0)] {
            let s = logistic(z);
            let direct = -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
            assert!((bce_with_logit(z, y) - direct).abs() < 1e-12);
        }
    }

    pub(crate) fn random_params(seed: u64, tasks: usize, dm: usize, dp: usize) -> ClassifierParams {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut p = ClassifierParams {
            projection: Matrix::glorot(dm, dp, &mut rng),
            tasks: Matrix::glorot(tasks, dm, &mut rng),
            bias: vec![0.0; tasks],
        };
        for b in &mut p.bias {
            *b = rng.random_range(-0.5..0.5);
        }
        p
    }

    proptest! {
        #[test]
        fn gradient_matches_finite_differences(seed in 0u64..10_000, label in proptest::option::of(0usize..3)) {
            let p = random_params(seed, 3, 4, 5);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 1);
            let e: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, g) = p.loss_grad(&e, label).unwrap();
            let f = |theta: &[f64]| {
                let mut q = p.clone();
                q.set_flat(theta);
                q.loss_grad(&e, label).unwrap().0
            };
            let numeric = central_difference(f, &p.flat(), 1e-5);
            prop_assert!(max_relative_error(&g, &numeric, 1e-6) <= 1e-4);
        }

        #[test]
        fn none_iff_best_score_below_threshold(seed in 0u64..10_000, theta in 0.01f64..0.99) {
            let p = random_params(seed, 4, 3, 3);
            let e = [0.5, -0.2, 0.9];
            let a = classify(&p, &e, theta).unwrap();
            let max = a.all_scores.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert_eq!(a.score, max);
            prop_assert_eq!(a.task_id.is_none(), max < theta);
        }
    }
}
