//! Synthetic routing benchmarks with planted tasks, plus the metrics and
//! baselines used to score routers against the planted truth.

mod baseline;
mod eval;

pub use baseline::{KnnBaseline, MlpBaseline};
pub use eval::{ari, cost_curve, macro_f1, majority_labels, eval_router, write_curve_csv, write_metrics_csv, CurvePoint, EvalMetrics};

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ModelCard, PromptRecord};
use crate::error::{Error, Result};
use crate::rank::{rbo, RankedList};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_tasks: usize,
    pub prompts_per_task: usize,
    pub embed_dim: usize,
    /// Distance between task centers, in units of `sigma`.
    pub center_separation: f64,
    /// Per-coordinate prompt noise around a center.
    pub sigma: f64,
    /// Mean quality per (task, model).
    pub affinity: Vec<Vec<f64>>,
    pub quality_noise: f64,
    /// Scale of a within-task linear effect of the prompt offset on each
    /// model's true quality. Zero gives task-constant means.
    pub prompt_effect: f64,
    pub outlier_count: usize,
    /// Outlier rankings are redrawn until their RBO at this persistence
    /// stays below the ceiling against every planted task ranking.
    pub outlier_rbo: Option<(f64, f64)>,
    /// Per-model cost; derived from mean affinity when absent.
    pub costs: Option<Vec<f64>>,
    pub id_prefix: String,
    pub seed: u64,
}

/// Planted labels and noise-free quality means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub prompt_ids: Vec<String>,
    /// `None` for outliers.
    pub planted_task: Vec<Option<usize>>,
    pub true_mean_quality: Vec<Vec<f64>>,
    pub oracle_choice: Vec<usize>,
}

fn argmax_low(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

impl GroundTruth {
    /// Truth rows reordered to follow `ds`.
    pub fn for_dataset(&self, ds: &Dataset) -> Result<GroundTruth> {
        let index: BTreeMap<&str, usize> = self
            .prompt_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        let mut out = GroundTruth {
            prompt_ids: Vec::new(),
            planted_task: Vec::new(),
            true_mean_quality: Vec::new(),
            oracle_choice: Vec::new(),
        };
        for r in ds.records() {
            let &i = index
                .get(r.prompt_id.as_str())
                .ok_or_else(|| Error::invalid(format!("prompt {} has no ground truth", r.prompt_id)))?;
            out.prompt_ids.push(r.prompt_id.clone());
            out.planted_task.push(self.planted_task[i]);
            out.true_mean_quality.push(self.true_mean_quality[i].clone());
            out.oracle_choice.push(self.oracle_choice[i]);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::invalid(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<GroundTruth> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let truth: GroundTruth = serde_json::from_str(&text).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let n = truth.prompt_ids.len();
        if truth.planted_task.len() != n || truth.true_mean_quality.len() != n || truth.oracle_choice.len() != n {
            return Err(Error::Artifact {
                path: path.to_path_buf(),
                message: "ground truth columns differ in length".into(),
            });
        }
        Ok(truth)
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_ids.is_empty()
    }
}

impl SynthSpec {
    /// Three tasks over ten models. Each task has a near-tied best pair, a
    /// clear third, and its own order for the rest.
    pub fn three_task(prompts_per_task: usize, seed: u64) -> Self {
        let tail = [0.62, 0.55, 0.48, 0.40, 0.33, 0.25, 0.15];
        let mut affinity = Vec::new();
        for (t, top) in [[0.90, 0.87, 0.75], [0.91, 0.88, 0.76], [0.89, 0.86, 0.74]].iter().enumerate() {
            let mut row = vec![0.0; 10];
            let order: Vec<usize> = (0..10).map(|i| (i + 3 * t) % 10).collect();
            for (rank, &m) in order.iter().enumerate() {
                row[m] = if rank < 3 { top[rank] } else { tail[rank - 3] };
            }
            affinity.push(row);
        }
        SynthSpec {
            n_tasks: 3,
            prompts_per_task,
            embed_dim: 16,
            center_separation: 10.0,
            sigma: 1.0,
            affinity,
            quality_noise: 0.03,
            prompt_effect: 0.0,
            outlier_count: 0,
            outlier_rbo: None,
            costs: None,
            id_prefix: "p".into(),
            seed,
        }
    }

    /// [`SynthSpec::three_task`] with noisy observed quality and a
    /// within-task prompt effect, so per-prompt estimates and task medians
    /// each carry signal the other lacks.
    pub fn noisy_three_task(prompts_per_task: usize, seed: u64) -> Self {
        SynthSpec {
            quality_noise: 0.1,
            prompt_effect: 0.06,
            ..SynthSpec::three_task(prompts_per_task, seed)
        }
    }

    /// Three tasks where model 0 is strong (0.9) on task 0 only and weak (0.3)
    /// elsewhere.
    pub fn specialization(prompts_per_task: usize, seed: u64) -> Self {
        let mut s = SynthSpec::three_task(prompts_per_task, seed);
        s.affinity[0][0] = 0.9;
        s.affinity[1][0] = 0.3;
        s.affinity[2][0] = 0.3;
        s
    }

    pub fn pool_size(&self) -> usize {
        self.affinity.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("synth spec: {m}")));
        if self.n_tasks == 0 || self.prompts_per_task == 0 {
            return bad("needs at least one task and one prompt per task");
        }
        if self.affinity.len() != self.n_tasks {
            return bad("affinity needs one row per task");
        }
        let n = self.pool_size();
        if n == 0 || self.affinity.iter().any(|r| r.len() != n) {
            return bad("affinity rows must share a nonzero model count");
        }
        if self.affinity.iter().flatten().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("affinity entries must lie in [0, 1]");
        }
        if !(self.center_separation > 0.0 && self.sigma > 0.0) {
            return bad("separation and sigma must be positive");
        }
        if self.quality_noise < 0.0 || self.prompt_effect < 0.0 {
            return bad("noise scales must be nonnegative");
        }
        let needed = self.n_tasks + usize::from(self.outlier_count > 0);
        if self.embed_dim < needed {
            return bad("embed_dim too small for orthogonal task centers");
        }
        if let Some(c) = &self.costs {
            if c.len() != n || c.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return bad("costs must be nonnegative, one per model");
            }
        }
        Ok(())
    }

    /// Costs rise with a model's mean affinity, jittered.
    fn derived_costs(&self) -> Vec<f64> {
        let mut rng = seeded_rng(self.seed, "synth/costs");
        let n = self.pool_size();
        (0..n)
            .map(|m| {
                let mean = self.affinity.iter().map(|r| r[m]).sum::<f64>() / self.n_tasks as f64;
                let jitter: f64 = rng.random_range(0.0..0.2);
                ((0.2 + 4.0 * mean + jitter) * 100.0).round() / 100.0
            })
            .collect()
    }

    pub fn pool(&self) -> Vec<ModelCard> {
        let costs = self.costs.clone().unwrap_or_else(|| self.derived_costs());
        costs
            .into_iter()
            .enumerate()
            .map(|(i, c)| ModelCard {
                model_id: format!("model-{i}"),
                index: i,
                cost_per_query: c,
            })
            .collect()
    }
}

fn center(spec: &SynthSpec, axis: usize) -> Vec<f64> {
    let mut c = vec![0.0; spec.embed_dim];
    c[axis] = spec.center_separation * spec.sigma / std::f64::consts::SQRT_2;
    c
}

/// Samples a dataset and its ground truth. Structure (centers, effect
/// directions, costs) depends only on the spec; `seed` drives the draws.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let n = spec.pool_size();
    let d = spec.embed_dim;
    let noise = Normal::new(0.0, spec.sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let desc_noise = Normal::new(0.0, spec.sigma / 2.0).map_err(|e| Error::invalid(e.to_string()))?;
    let q_noise = Normal::new(0.0, spec.quality_noise.max(f64::MIN_POSITIVE)).map_err(|e| Error::invalid(e.to_string()))?;

    // Effect directions are structural, so train and eval draws share them.
    let mut dir_rng = seeded_rng(0x5eed, "synth/effect");
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let directions: Vec<Vec<Vec<f64>>> = (0..spec.n_tasks)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let v: Vec<f64> = (0..d).map(|_| std_normal.sample(&mut dir_rng)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.into_iter().map(|x| x / norm).collect()
                })
                .collect()
        })
        .collect();

    let mut rng = seeded_rng(spec.seed, "synth/draws");
    let mut records = Vec::new();
    let mut truth = GroundTruth {
        prompt_ids: Vec::new(),
        planted_task: Vec::new(),
        true_mean_quality: Vec::new(),
        oracle_choice: Vec::new(),
    };
    for t in 0..spec.n_tasks {
        let c = center(spec, t);
        for i in 0..spec.prompts_per_task {
            let offset: Vec<f64> = (0..d).map(|_| noise.sample(&mut rng)).collect();
            let prompt: Vec<f64> = c.iter().zip(&offset).map(|(a, b)| a + b).collect();
            let desc: Vec<f64> = c.iter().map(|a| a + desc_noise.sample(&mut rng)).collect();
            let mean: Vec<f64> = (0..n)
                .map(|m| {
                    let effect: f64 = directions[t][m].iter().zip(&offset).map(|(u, z)| u * z).sum();
                    (spec.affinity[t][m] + spec.prompt_effect * effect / spec.sigma).clamp(0.0, 1.0)
                })
                .collect();
            let quality: Vec<f64> = mean
                .iter()
                .map(|&mu| {
                    let eps = if spec.quality_noise > 0.0 { q_noise.sample(&mut rng) } else { 0.0 };
                    (mu + eps).clamp(0.0, 1.0)
                })
                .collect();
            let id = format!("{}-t{t}-{i}", spec.id_prefix);
            truth.prompt_ids.push(id.clone());
            truth.planted_task.push(Some(t));
            truth.oracle_choice.push(argmax_low(&mean));
            truth.true_mean_quality.push(mean);
            records.push(PromptRecord {
                prompt_id: id,
                source: format!("task-{t}"),
                prompt_embedding: prompt,
                desc_embedding: desc,
                quality,
            });
        }
    }

    let task_lists: Vec<RankedList> = spec
        .affinity
        .iter()
        .map(|r| RankedList::from_quality(r))
        .collect::<Result<_>>()?;
    for j in 0..spec.outlier_count {
        let axis = (spec.n_tasks + j).min(d - 1);
        let c = center(spec, axis);
        let mut quality: Vec<f64>;
        let mut attempts = 0;
        loop {
            quality = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let Some((p, ceiling)) = spec.outlier_rbo else { break };
            let list = RankedList::from_quality(&quality)?;
            let mut ok = true;
            for other in &task_lists {
                if rbo(&list, other, p)? >= ceiling {
                    ok = false;
                    break;
                }
            }
            attempts += 1;
            if ok {
                break;
            }
            if attempts > 10_000 {
                return Err(Error::invalid("could not draw a disagreeing outlier ranking"));
            }
        }
        let prompt: Vec<f64> = c.iter().map(|a| a + noise.sample(&mut rng)).collect();
        let desc: Vec<f64> = c.iter().map(|a| a + desc_noise.sample(&mut rng)).collect();
        let id = format!("{}-out-{j}", spec.id_prefix);
        truth.prompt_ids.push(id.clone());
        truth.planted_task.push(None);
        truth.oracle_choice.push(argmax_low(&quality));
        truth.true_mean_quality.push(quality.clone());
        records.push(PromptRecord {
            prompt_id: id,
            source: "outlier".into(),
            prompt_embedding: prompt,
            desc_embedding: desc,
            quality,
        });
    }
    Ok((Dataset::new(spec.pool(), records)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discovery::graph::cosine;

    #[test]
    fn noiseless_single_task() {
        let spec = SynthSpec {
            n_tasks: 1,
            prompts_per_task: 8,
            embed_dim: 4,
            affinity: vec![vec![0.9, 0.1]],
            quality_noise: 0.0,
            ..SynthSpec::three_task(1, 0)
        };
        let (ds, truth) = generate(&spec).unwrap();
        assert!(ds.records().iter().all(|r| r.quality == vec![0.9, 0.1]));
        assert!(truth.oracle_choice.iter().all(|&m| m == 0));
    }

    #[test]
    fn counts_and_labels() {
        let spec = SynthSpec {
            outlier_count: 4,
            ..SynthSpec::three_task(20, 1)
        };
        let (ds, truth) = generate(&spec).unwrap();
        assert_eq!(ds.len(), 64);
        for (i, t) in truth.planted_task.iter().enumerate() {
            let expected = if i < 60 { Some(i / 20) } else { None };
            assert_eq!(*t, expected);
        }
    }

    #[test]
    fn same_seed_same_bits() {
        let spec = SynthSpec::three_task(10, 4);
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn centers_are_separated_relative_to_spread() {
        let spec = SynthSpec::three_task(100, 2);
        let (ds, truth) = generate(&spec).unwrap();
        let centers: Vec<Vec<f64>> = (0..3).map(|t| center(&spec, t)).collect();
        let cross = (0..3)
            .flat_map(|a| (a + 1..3).map(move |b| (a, b)))
            .map(|(a, b)| cosine(&centers[a], &centers[b]).unwrap())
            .fold(f64::MIN, f64::max);
        let closer = ds
            .records()
            .iter()
            .zip(&truth.planted_task)
            .filter(|(r, t)| cosine(&r.prompt_embedding, &centers[t.unwrap()]).unwrap() > cross)
            .count();
        assert!(closer as f64 >= 0.99 * ds.len() as f64);
    }

    #[test]
    fn outliers_disagree_with_every_task() {
        let spec = SynthSpec {
            outlier_count: 4,
            outlier_rbo: Some((0.7, 0.25)),
            ..SynthSpec::three_task(5, 3)
        };
        let (ds, _) = generate(&spec).unwrap();
        let tasks: Vec<RankedList> = spec.affinity.iter().map(|r| RankedList::from_quality(r).unwrap()).collect();
        for r in &ds.records()[15..] {
            let l = RankedList::from_quality(&r.quality).unwrap();
            assert!(tasks.iter().all(|t| rbo(&l, t, 0.7).unwrap() < 0.25));
        }
    }

    #[test]
    fn costs_follow_mean_affinity_and_are_nonnegative() {
        let spec = SynthSpec::three_task(1, 0);
        let pool = spec.pool();
        assert!(pool.iter().all(|m| m.cost_per_query >= 0.0));
        assert_eq!(pool.len(), 10);
    }

    #[test]
    fn rejects_infeasible_specs() {
        let mut s = SynthSpec::three_task(5, 0);
        s.embed_dim = 2;
        assert!(generate(&s).is_err());
        let mut s = SynthSpec::three_task(5, 0);
        s.affinity[0][0] = 1.5;
        assert!(generate(&s).is_err());
    }
}
