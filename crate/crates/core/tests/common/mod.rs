//! Independent reference implementations used by the integration tests and
//! the acceptance runner.

#![allow(dead_code)]

use copfl::model::{self, LabeledBatch, ModelSpec};
use copfl::ParameterVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_batch(rng: &mut ChaCha8Rng, dim: usize, classes: usize, n: usize) -> LabeledBatch {
    let inputs = random_vec(rng, dim * n, 2.0);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledBatch::new(dim, inputs, labels).unwrap()
}

/// Largest relative error between the analytic gradient and central
/// differences, with `FD_FLOOR` guarding the denominator.
pub fn max_fd_error(spec: &ModelSpec, w: &ParameterVector, batch: &LabeledBatch) -> f64 {
    let (_, grad) = model::loss_and_grad(spec, w, batch).unwrap();
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let mut plus = w.clone();
        plus[i] += FD_STEP;
        let mut minus = w.clone();
        minus[i] -= FD_STEP;
        let fp = model::predict_loss(spec, &plus, batch).unwrap();
        let fm = model::predict_loss(spec, &minus, batch).unwrap();
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let denom = grad[i].abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max((grad[i] - numeric).abs() / denom);
    }
    worst
}

/// Draws a random model of `kind` and returns its worst finite-difference error.
pub fn fd_draw(mlp: bool, seed: u64) -> f64 {
    let mut r = rng(seed);
    let dim = r.random_range(2..6);
    let classes = r.random_range(2..5);
    let spec = if mlp {
        ModelSpec::mlp2(dim, r.random_range(2..7), classes)
    } else {
        ModelSpec::softmax_regression(dim, classes)
    };
    let w = ParameterVector::from_vec(random_vec(&mut r, spec.num_params(), 1.0));
    let n = r.random_range(1..9);
    let batch = random_batch(&mut r, dim, classes, n);
    max_fd_error(&spec, &w, &batch)
}

/// Plain Adam with bias correction, written without masks or phases.
pub struct TextbookAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl TextbookAdam {
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn step(&mut self, w: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powf(self.t as f64);
        let c2 = 1.0 - self.beta2.powf(self.t as f64);
        for i in 0..w.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
