//! Small dense-network toolkit shared by the classifier and the quality router.
//!
//! Everything here is plain `f64` arithmetic on row-major buffers: a linear
//! map, a two-layer ReLU/logistic head, Adam updates, and the finite-difference
//! helpers used to check the analytic gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeded_rng;

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `self^T * y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += y x^T`.
    pub fn add_outer(&mut self, y: &[f64], x: &[f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (w, &xc) in self.row_mut(r).iter_mut().zip(x) {
                *w += yr * xc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Two-layer quality head: `logistic(w2 . relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

/// Gradient of a loss with respect to every [`Mlp`] parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpGrad {
    pub fn zeros_like(p: &Mlp) -> Self {
        MlpGrad {
            w1: Matrix::zeros(p.w1.rows, p.w1.cols),
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGrad, scale: f64) {
        axpy(&mut self.w1.data, &other.w1.data, scale);
        axpy(&mut self.b1, &other.b1, scale);
        axpy(&mut self.w2, &other.w2, scale);
        self.b2 += scale * other.b2;
    }

    /// Gradient entries in the same order as [`Mlp::flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.data.clone();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }
}

fn axpy(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

/// Intermediate values of one forward pass, kept for backprop.
struct MlpTrace {
    pre: Vec<f64>,
    hidden: Vec<f64>,
    out: f64,
}

impl Mlp {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Mlp {
            w1: Matrix::zeros(hidden_dim, input_dim),
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; hidden_dim],
            b2: 0.0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let w1 = Matrix::glorot(hidden_dim, input_dim, rng);
        let w2 = Matrix::glorot(1, hidden_dim, rng).data;
        Mlp {
            w1,
            b1: vec![0.0; hidden_dim],
            w2,
            b2: 0.0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    pub fn param_count(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.len() + 1
    }

    /// Parameters as one vector: W1 (row-major), b1, w2, b2.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.w1.data.clone();
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        assert_eq!(v.len(), self.param_count());
        let (w1, rest) = v.split_at(self.w1.data.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, b2) = rest.split_at(self.w2.len());
        self.w1.data.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = b2[0];
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("mlp input", self.input_dim(), x.len()));
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> MlpTrace {
        let mut pre = self.w1.matvec(x);
        for (p, b) in pre.iter_mut().zip(&self.b1) {
            *p += b;
        }
        let hidden: Vec<f64> = pre.iter().map(|&z| z.max(0.0)).collect();
        let out = logistic(dot(&self.w2, &hidden) + self.b2);
        MlpTrace { pre, hidden, out }
    }

    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.trace(x).out)
    }

    /// Forward pass without the shape check; callers guarantee `x` fits.
    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> f64 {
        self.trace(x).out
    }

    /// Backprop of `d loss / d out = upstream` through the head. Returns
    /// (output, parameter gradient, input gradient).
    pub(crate) fn backward(&self, x: &[f64], upstream: impl Fn(f64) -> f64) -> (f64, MlpGrad, Vec<f64>) {
        let t = self.trace(x);
        let dz2 = upstream(t.out) * t.out * (1.0 - t.out);
        let dpre: Vec<f64> = self
            .w2
            .iter()
            .zip(&t.pre)
            .map(|(&w, &z)| if z > 0.0 { w * dz2 } else { 0.0 })
            .collect();
        let mut w1 = Matrix::zeros(self.w1.rows, self.w1.cols);
        w1.add_outer(&dpre, x);
        let dx = self.w1.t_matvec(&dpre);
        let grad = MlpGrad {
            w1,
            b1: dpre,
            w2: t.hidden.iter().map(|h| h * dz2).collect(),
            b2: dz2,
        };
        (t.out, grad, dx)
    }

    /// Gradient of `(forward(x) - target)^2`; also returns the output.
    pub fn squared_error_grad(&self, x: &[f64], target: f64) -> Result<(f64, MlpGrad)> {
        self.check_input(x)?;
        let (out, grad, _) = self.backward(x, |out| 2.0 * (out - target));
        Ok((out, grad))
    }
}

/// Which [`Mlp`] parameter groups stay fixed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrozenMask {
    pub w1: bool,
    pub b1: bool,
    pub w2: bool,
    pub b2: bool,
}

impl FrozenMask {
    pub const NONE: FrozenMask = FrozenMask {
        w1: false,
        b1: false,
        w2: false,
        b2: false,
    };
    pub const ALL: FrozenMask = FrozenMask {
        w1: true,
        b1: true,
        w2: true,
        b2: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::invalid(
                "train spec needs a positive learning rate and batch size",
            ));
        }
        Ok(())
    }

    /// Same spec with a seed derived from `label`.
    pub fn derived(&self, label: &str) -> TrainSpec {
        use rand::RngCore;
        TrainSpec {
            seed: seeded_rng(self.seed, label).next_u64(),
            ..self.clone()
        }
    }
}

/// Adam moments for one flat parameter slice.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            lr,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Adam state for each parameter group of one [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpOptimizer {
    w1: Adam,
    b1: Adam,
    w2: Adam,
    b2: Adam,
    mask: FrozenMask,
}

impl MlpOptimizer {
    pub fn new(p: &Mlp, lr: f64, mask: FrozenMask) -> Self {
        MlpOptimizer {
            w1: Adam::new(p.w1.data.len(), lr),
            b1: Adam::new(p.b1.len(), lr),
            w2: Adam::new(p.w2.len(), lr),
            b2: Adam::new(1, lr),
            mask,
        }
    }

    pub fn step(&mut self, p: &mut Mlp, g: &MlpGrad) {
        if !self.mask.w1 {
            self.w1.step(&mut p.w1.data, &g.w1.data);
        }
        if !self.mask.b1 {
            self.b1.step(&mut p.b1, &g.b1);
        }
        if !self.mask.w2 {
            self.w2.step(&mut p.w2, &g.w2);
        }
        if !self.mask.b2 {
            let mut b2 = [p.b2];
            self.b2.step(&mut b2, &[g.b2]);
            p.b2 = b2[0];
        }
    }
}

/// Loss before training and after every epoch, measured on the full data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

pub fn mean_squared_error(params: &Mlp, data: &[(Vec<f64>, f64)]) -> f64 {
    let total: f64 = data
        .iter()
        .map(|(x, t)| (params.forward_unchecked(x) - t).powi(2))
        .sum();
    total / data.len() as f64
}

/// Epoch-wise batch order: a fresh shuffle per epoch when `shuffle` is set.
pub(crate) fn batch_orders(n: usize, spec: &TrainSpec) -> impl Iterator<Item = Vec<usize>> + '_ {
    use rand::seq::SliceRandom;
    let mut rng = seeded_rng(spec.seed, "batches");
    (0..spec.epochs).map(move |_| {
        let mut idx: Vec<usize> = (0..n).collect();
        if spec.shuffle {
            idx.shuffle(&mut rng);
        }
        idx
    })
}

pub(crate) fn check_finite(loss: f64, what: &str, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!(
            "{what}: loss became {loss} after epoch {epoch}"
        )))
    }
}

/// Mini-batch Adam on mean squared error. Groups under `mask` are untouched.
pub fn train(
    params: &Mlp,
    data: &[(Vec<f64>, f64)],
    spec: &TrainSpec,
    mask: FrozenMask,
) -> Result<(Mlp, TrainReport)> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    for (x, _) in data {
        params.check_input(x)?;
    }
    let mut p = params.clone();
    let mut opt = MlpOptimizer::new(&p, spec.learning_rate, mask);
    let initial_loss = mean_squared_error(&p, data);
    check_finite(initial_loss, "mlp", 0)?;
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    for (epoch, order) in batch_orders(data.len(), spec).enumerate() {
        for batch in order.chunks(spec.batch_size) {
            let mut g = MlpGrad::zeros_like(&p);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, t) = &data[i];
                let (_, gi, _) = p.backward(x, |out| 2.0 * (out - t));
                g.add_scaled(&gi, scale);
            }
            opt.step(&mut p, &g);
        }
        let loss = mean_squared_error(&p, data);
        check_finite(loss, "mlp", epoch + 1)?;
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

/// Min-max scaling to `[0, 1]`. A constant vector maps to all 0.5.
pub fn minmax_norm(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        let span = hi - lo;
        v.iter().map(|x| (x - lo) / span).collect()
    } else {
        vec![0.5; v.len()]
    }
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
