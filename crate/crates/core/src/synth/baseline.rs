use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::discovery::graph::cosine;
use crate::error::{Error, Result};
use crate::neural::{dot, Adam, Matrix, TrainSpec};
use crate::seeded_rng;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Mean quality over the `k` most cosine-similar training prompts.
#[derive(Debug, Clone)]
pub struct KnnBaseline {
    embeddings: Vec<Vec<f64>>,
    quality: Vec<Vec<f64>>,
    k: usize,
}

impl KnnBaseline {
    /// `k` is clamped to the training size.
    pub fn fit(train: &Dataset, k: usize) -> Result<Self> {
        if train.is_empty() || k == 0 {
            return Err(Error::invalid("knn baseline needs training data and k >= 1"));
        }
        Ok(KnnBaseline {
            embeddings: train.records().iter().map(|r| r.prompt_embedding.clone()).collect(),
            quality: train.records().iter().map(|r| r.quality.clone()).collect(),
            k: k.min(train.len()),
        })
    }

    pub fn decide(&self, embedding: &[f64]) -> Result<usize> {
        let dim = self.embeddings[0].len();
        if embedding.len() != dim {
            return Err(Error::dim("knn query", dim, embedding.len()));
        }
        let mut sims: Vec<(f64, usize)> = self
            .embeddings
            .iter()
            .enumerate()
            .map(|(i, e)| (cosine(embedding, e).unwrap_or(-2.0), i))
            .collect();
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let n = self.quality[0].len();
        let mut mean = vec![0.0; n];
        for &(_, i) in &sims[..self.k] {
            for (m, q) in mean.iter_mut().zip(&self.quality[i]) {
                *m += q;
            }
        }
        Ok(argmax(&mean))
    }
}

/// One-hidden-layer softmax classifier over the per-prompt best model.
#[derive(Debug, Clone)]
pub struct MlpBaseline {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
}

impl MlpBaseline {
    fn flat_len(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len()
    }

    fn logits(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let pre: Vec<f64> = self.w1.matvec(x).iter().zip(&self.b1).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> = pre.iter().map(|z| z.max(0.0)).collect();
        let out: Vec<f64> = (0..self.w2.rows).map(|c| dot(self.w2.row(c), &hidden) + self.b2[c]).collect();
        (pre, hidden, out)
    }

    fn softmax(z: &[f64]) -> Vec<f64> {
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Cross-entropy gradient for one example, in the flat layout
    /// W1, b1, W2, b2.
    fn grad(&self, x: &[f64], label: usize, acc: &mut [f64], scale: f64) -> f64 {
        let (pre, hidden, out) = self.logits(x);
        let mut dz = Self::softmax(&out);
        let loss = -dz[label].max(1e-300).ln();
        dz[label] -= 1.0;
        let (h, d) = (self.w1.rows, self.w1.cols);
        let off_b1 = h * d;
        let off_w2 = off_b1 + h;
        let off_b2 = off_w2 + self.w2.data.len();
        let mut dh = vec![0.0; h];
        for (c, &g) in dz.iter().enumerate() {
            acc[off_b2 + c] += scale * g;
            for j in 0..h {
                acc[off_w2 + c * h + j] += scale * g * hidden[j];
                dh[j] += g * self.w2.data[c * h + j];
            }
        }
        for j in 0..h {
            if pre[j] <= 0.0 {
                continue;
            }
            acc[off_b1 + j] += scale * dh[j];
            for k in 0..d {
                acc[j * d + k] += scale * dh[j] * x[k];
            }
        }
        loss
    }

    fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.data.clone();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2.data);
        v.extend_from_slice(&self.b2);
        v
    }

    fn set_flat(&mut self, v: &[f64]) {
        let (w1, rest) = v.split_at(self.w1.data.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.data.len());
        self.w1.data.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.data.copy_from_slice(w2);
        self.b2.copy_from_slice(b2);
    }

    /// Trains on argmax-quality labels (ties to the lower index).
    pub fn fit(train: &Dataset, hidden_dim: usize, spec: &TrainSpec) -> Result<Self> {
        spec.validate()?;
        if train.is_empty() || hidden_dim == 0 {
            return Err(Error::invalid("mlp baseline needs training data and a hidden layer"));
        }
        let d = train.prompt_dim();
        let n = train.pool_size();
        let mut rng = seeded_rng(spec.seed, "baseline/mlp");
        let mut net = MlpBaseline {
            w1: Matrix::glorot(hidden_dim, d, &mut rng),
            b1: vec![0.0; hidden_dim],
            w2: Matrix::glorot(n, hidden_dim, &mut rng),
            b2: vec![0.0; n],
        };
        let data: Vec<(&[f64], usize)> = train
            .records()
            .iter()
            .map(|r| (r.prompt_embedding.as_slice(), argmax(&r.quality)))
            .collect();
        let mut opt = Adam::new(net.flat_len(), spec.learning_rate);
        let mut params = net.flat();
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..spec.epochs {
            if spec.shuffle {
                order.shuffle(&mut rng);
            }
            for batch in order.chunks(spec.batch_size) {
                let mut g = vec![0.0; params.len()];
                let scale = 1.0 / batch.len() as f64;
                for &i in batch {
                    net.grad(data[i].0, data[i].1, &mut g, scale);
                }
                opt.step(&mut params, &g);
                net.set_flat(&params);
            }
            let loss: f64 = data.iter().map(|(x, y)| net.grad(x, *y, &mut vec![0.0; params.len()], 0.0)).sum();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("mlp baseline: loss {loss} after epoch {}", epoch + 1)));
            }
        }
        Ok(net)
    }

    pub fn decide(&self, embedding: &[f64]) -> Result<usize> {
        if embedding.len() != self.w1.cols {
            return Err(Error::dim("mlp baseline query", self.w1.cols, embedding.len()));
        }
        Ok(argmax(&self.logits(embedding).2))
    }
}
