//! A stage-partitioned toy network and its sequential reference training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the output `a`.
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense `out x in` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yi) in self.data.chunks(self.cols).zip(y) {
            for (o, a) in out.iter_mut().zip(r) {
                *o += a * yi;
            }
        }
        out
    }

    /// `max |a - b| / max |b|` (absolute when `b` is zero).
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        let num = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let den = other.data.iter().map(|b| b.abs()).fold(0.0, f64::max);
        if den > 0.0 {
            num / den
        } else {
            num
        }
    }
}

/// `D` dense layers with an elementwise nonlinearity; stage `s` is layer `s`.
/// Loss per sample is `0.5 * ||y - t||^2`, averaged over the batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub weights: Vec<Matrix>,
    pub activation: Activation,
}

/// Inputs and targets, one row per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl Batch {
    pub fn random(samples: usize, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = |n: usize, d: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let inputs = rows(samples, in_dim);
        let targets = rows(samples, out_dim);
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> Batch {
        Batch { inputs: self.inputs[start..start + len].to_vec(), targets: self.targets[start..start + len].to_vec() }
    }
}

/// Per-layer inputs and outputs of one sample.
pub(crate) struct Trace {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl ToyModel {
    /// Seeded model with layer widths `dims` (`dims.len() = D + 1`).
    pub fn new(dims: &[usize], activation: Activation, seed: u64) -> Self {
        assert!(dims.len() >= 2 && dims.iter().all(|&d| (1..=16).contains(&d)), "dims must be in 1..=16");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let scale = 1.0 / (w[0] as f64).sqrt();
                Matrix {
                    rows: w[1],
                    cols: w[0],
                    data: (0..w[0] * w[1]).map(|_| rng.gen_range(-scale..scale)).collect(),
                }
            })
            .collect();
        Self { weights, activation }
    }

    /// `D` layers of width `width` with tanh.
    pub fn uniform(depth: usize, width: usize, seed: u64) -> Self {
        Self::new(&vec![width; depth + 1], Activation::Tanh, seed)
    }

    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].cols
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().expect("non-empty").rows
    }

    pub(crate) fn layer_forward(w: &Matrix, act: Activation, x: &[f64]) -> Vec<f64> {
        w.matvec(x).into_iter().map(|z| act.apply(z)).collect()
    }

    /// Accumulates `dz x^T` into `grad` and returns `W^T dz`.
    pub(crate) fn layer_backward(
        w: &Matrix,
        act: Activation,
        x: &[f64],
        a: &[f64],
        da: &[f64],
        grad: &mut impl FnMut(usize, f64),
    ) -> Vec<f64> {
        let dz: Vec<f64> = a.iter().zip(da).map(|(a, d)| d * act.slope(*a)).collect();
        for (i, &dzi) in dz.iter().enumerate() {
            for (j, &xj) in x.iter().enumerate() {
                grad(i * w.cols + j, dzi * xj);
            }
        }
        w.t_matvec(&dz)
    }

    pub(crate) fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.depth());
        let mut outputs = Vec::with_capacity(self.depth());
        let mut cur = x.to_vec();
        for w in &self.weights {
            let y = Self::layer_forward(w, self.activation, &cur);
            inputs.push(cur);
            outputs.push(y.clone());
            cur = y;
        }
        Trace { inputs, outputs }
    }

    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        self.trace(x).outputs.pop().expect("non-empty")
    }

    /// Mean loss over the batch.
    pub fn loss(&self, batch: &Batch) -> f64 {
        let total: f64 = batch
            .inputs
            .iter()
            .zip(&batch.targets)
            .map(|(x, t)| 0.5 * self.predict(x).iter().zip(t).map(|(y, t)| (y - t).powi(2)).sum::<f64>())
            .sum();
        total / batch.len() as f64
    }

    /// Mean-loss gradient of every layer.
    pub fn gradients(&self, batch: &Batch) -> Vec<Matrix> {
        let mut g: Vec<Matrix> = self.weights.iter().map(|w| Matrix::zeros(w.rows, w.cols)).collect();
        for (x, t) in batch.inputs.iter().zip(&batch.targets) {
            let tr = self.trace(x);
            let mut da: Vec<f64> = tr.outputs.last().expect("non-empty").iter().zip(t).map(|(y, t)| y - t).collect();
            for s in (0..self.depth()).rev() {
                let gs = &mut g[s];
                da = Self::layer_backward(
                    &self.weights[s],
                    self.activation,
                    &tr.inputs[s],
                    &tr.outputs[s],
                    &da,
                    &mut |i, v| gs.data[i] += v,
                );
            }
        }
        let n = batch.len() as f64;
        for m in &mut g {
            m.data.iter_mut().for_each(|v| *v /= n);
        }
        g
    }

    /// One plain SGD step on the whole batch.
    pub fn sgd_step(&self, batch: &Batch, lr: f64) -> ToyModel {
        let g = self.gradients(batch);
        let weights = self
            .weights
            .iter()
            .zip(&g)
            .map(|(w, g)| Matrix { data: w.data.iter().zip(&g.data).map(|(w, g)| w - lr * g).collect(), ..w.clone() })
            .collect();
        ToyModel { weights, activation: self.activation }
    }

    /// Largest relative layer difference against `other`.
    pub fn rel_diff(&self, other: &ToyModel) -> f64 {
        self.weights.iter().zip(&other.weights).map(|(a, b)| a.rel_diff(b)).fold(0.0, f64::max)
    }
}

/// Mini-batch SGD on one process: the reference every synchronous pipeline
/// must reproduce.
pub fn sequential_sgd(model: &ToyModel, batch: &Batch, lr: f64) -> ToyModel {
    model.sgd_step(batch, lr)
}

/// Largest relative error between analytic gradients and central finite
/// differences with step `1e-5`. Errors are relative to
/// `max(|analytic|, |numeric|, 1e-3)`, so vanishing gradients are compared
/// absolutely.
pub fn check_gradients(model: &ToyModel, batch: &Batch) -> f64 {
    let h = 1e-5;
    let g = model.gradients(batch);
    let mut worst: f64 = 0.0;
    for (s, gs) in g.iter().enumerate() {
        for (i, &an) in gs.data.iter().enumerate() {
            let mut plus = model.clone();
            plus.weights[s].data[i] += h;
            let mut minus = model.clone();
            minus.weights[s].data[i] -= h;
            let fd = (plus.loss(batch) - minus.loss(batch)) / (2.0 * h);
            worst = worst.max((fd - an).abs() / an.abs().max(fd.abs()).max(1e-3));
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_finite_differences() {
        let m = ToyModel::uniform(4, 6, 0);
        let b = Batch::random(8, 6, 6, 1);
        assert!(check_gradients(&m, &b) <= 1e-5);
    }

    #[test]
    fn identity_zero_input_zero_gradient() {
        let m = ToyModel { weights: vec![Matrix::identity(3); 3], activation: Activation::Tanh };
        let b = Batch { inputs: vec![vec![0.0; 3]; 2], targets: vec![vec![0.0; 3]; 2] };
        assert!(m.gradients(&b).iter().all(|g| g.data.iter().all(|&v| v == 0.0)));
        assert_eq!(check_gradients(&m, &b), 0.0);
    }

    #[test]
    fn single_linear_stage_is_least_squares() {
        let m = ToyModel::new(&[3, 2], Activation::Identity, 7);
        let b = Batch::random(5, 3, 2, 3);
        let g = m.gradients(&b);
        let mut expect = Matrix::zeros(2, 3);
        for (x, t) in b.inputs.iter().zip(&b.targets) {
            let r: Vec<f64> = m.weights[0].matvec(x).iter().zip(t).map(|(y, t)| y - t).collect();
            for (i, ri) in r.iter().enumerate() {
                for (j, xj) in x.iter().enumerate() {
                    expect.data[i * 3 + j] += ri * xj / 5.0;
                }
            }
        }
        assert!(g[0].rel_diff(&expect) < 1e-14);
    }

    #[test]
    fn seeded_init_is_deterministic() {
        assert_eq!(ToyModel::uniform(3, 4, 9), ToyModel::uniform(3, 4, 9));
        assert_ne!(ToyModel::uniform(3, 4, 9), ToyModel::uniform(3, 4, 10));
    }
}
