//! Small classifiers with hand-written gradients.
//!
//! Two architectures are supported: multinomial softmax regression and a
//! two-layer ReLU MLP. Both are stored flat, layer by layer, as
//! `[W1 (row-major, out × in), b1, W2, b2]`, and both use mean
//! cross-entropy over the batch computed through log-sum-exp.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::param::ParameterVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for softmax regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp2(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp2,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::arg("model needs input_dim >= 1 and num_classes >= 2"));
        }
        if self.kind == ModelKind::Mlp2 && self.hidden_dim == 0 {
            return Err(Error::arg("mlp2 needs hidden_dim >= 1"));
        }
        Ok(())
    }

    /// Total parameter count `d`.
    pub fn num_params(&self) -> usize {
        let (i, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        match self.kind {
            ModelKind::SoftmaxRegression => (i + 1) * c,
            ModelKind::Mlp2 => (i + 1) * h + (h + 1) * c,
        }
    }

    /// Coordinate range of the output layer (weights and bias).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let d = self.num_params();
        let head = match self.kind {
            ModelKind::SoftmaxRegression => d,
            ModelKind::Mlp2 => (self.hidden_dim + 1) * self.num_classes,
        };
        d - head..d
    }
}

/// Row-major `len × dim` inputs with one class label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    dim: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(dim: usize, inputs: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("batch input dimension must be >= 1"));
        }
        check_len(labels.len() * dim, inputs.len())?;
        Ok(Self { dim, inputs, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn input_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        debug_assert_eq!(x.len(), self.dim);
        self.inputs.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::empty(self.dim);
        out.inputs.reserve(indices.len() * self.dim);
        for &i in indices {
            out.push(self.input(i), self.labels[i]);
        }
        out
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        check_len(self.dim, other.dim)?;
        let mut out = self.clone();
        out.inputs.extend_from_slice(&other.inputs);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterVector {
    let mut rng = rng::keyed(seed, &[rng::TAG_INIT]);
    let mut out = Vec::with_capacity(spec.num_params());
    let mut layer = |fan_in: usize, fan_out: usize, out: &mut Vec<f64>| {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        out.extend((0..fan_in * fan_out).map(|_| normal.sample(&mut rng)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    };
    match spec.kind {
        ModelKind::SoftmaxRegression => layer(spec.input_dim, spec.num_classes, &mut out),
        ModelKind::Mlp2 => {
            layer(spec.input_dim, spec.hidden_dim, &mut out);
            layer(spec.hidden_dim, spec.num_classes, &mut out);
        }
    }
    ParameterVector::from_vec(out)
}

struct Dense<'a> {
    weights: &'a [f64],
    bias: &'a [f64],
    fan_in: usize,
}

impl Dense<'_> {
    fn forward(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.fan_in).zip(self.bias))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }
}

fn split_layers<'a>(spec: &ModelSpec, params: &'a [f64]) -> (Dense<'a>, Option<Dense<'a>>) {
    let (i, h, c) = (spec.input_dim, spec.hidden_dim, spec.num_classes);
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let (w, b) = params.split_at(i * c);
            (Dense { weights: w, bias: b, fan_in: i }, None)
        }
        ModelKind::Mlp2 => {
            let (w1, rest) = params.split_at(i * h);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h * c);
            (
                Dense { weights: w1, bias: b1, fan_in: i },
                Some(Dense { weights: w2, bias: b2, fan_in: h }),
            )
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_inputs(spec: &ModelSpec, params: &ParameterVector, batch: &LabeledBatch) -> Result<()> {
    check_len(spec.num_params(), params.len())?;
    check_len(spec.input_dim, batch.dim())?;
    if batch.is_empty() {
        return Err(Error::arg("batch must contain at least one sample"));
    }
    if let Some(&bad) = batch.labels().iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::arg(format!(
            "label {bad} outside [0, {})",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Shared forward (and optionally backward) pass. The loss is accumulated the
/// same way whether or not a gradient is requested.
fn evaluate(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &LabeledBatch,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    check_inputs(spec, params, batch)?;
    let (first, second) = split_layers(spec, params.as_slice());
    let c = spec.num_classes;
    let scale = 1.0 / batch.len() as f64;
    let mut hidden = vec![0.0; spec.hidden_dim];
    let mut logits = vec![0.0; c];
    let mut dhidden = vec![0.0; spec.hidden_dim];
    let mut total = 0.0;

    for s in 0..batch.len() {
        let x = batch.input(s);
        let y = batch.labels()[s];
        match &second {
            None => first.forward(x, &mut logits),
            Some(out_layer) => {
                first.forward(x, &mut hidden);
                for h in hidden.iter_mut() {
                    *h = h.max(0.0);
                }
                out_layer.forward(&hidden, &mut logits);
            }
        }
        let lse = log_sum_exp(&logits);
        total += lse - logits[y];

        let Some(g) = grad.as_deref_mut() else { continue };
        // dL/dz = softmax(z) - onehot(y), averaged over the batch
        for (k, z) in logits.iter_mut().enumerate() {
            *z = ((*z - lse).exp() - if k == y { 1.0 } else { 0.0 }) * scale;
        }
        let dz = &logits;
        match &second {
            None => accumulate_dense(g, 0, spec.input_dim, x, dz),
            Some(out_layer) => {
                let h = spec.hidden_dim;
                let first_len = (spec.input_dim + 1) * h;
                accumulate_dense(g, first_len, h, &hidden, dz);
                dhidden.iter_mut().for_each(|v| *v = 0.0);
                for (row, &dzk) in out_layer.weights.chunks_exact(h).zip(dz) {
                    for (dh, w) in dhidden.iter_mut().zip(row) {
                        *dh += w * dzk;
                    }
                }
                // ReLU subgradient is 0 at exactly 0; hidden was clamped there.
                for (dh, &a) in dhidden.iter_mut().zip(&hidden) {
                    if a <= 0.0 {
                        *dh = 0.0;
                    }
                }
                accumulate_dense(g, 0, spec.input_dim, x, &dhidden);
            }
        }
    }

    let loss = total * scale;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    if let Some(g) = grad {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
    }
    Ok(loss)
}

fn accumulate_dense(grad: &mut [f64], offset: usize, fan_in: usize, x: &[f64], dout: &[f64]) {
    let fan_out = dout.len();
    let (w, rest) = grad[offset..].split_at_mut(fan_in * fan_out);
    for (row, &d) in w.chunks_exact_mut(fan_in).zip(dout) {
        for (gw, xi) in row.iter_mut().zip(x) {
            *gw += d * xi;
        }
    }
    for (gb, &d) in rest[..fan_out].iter_mut().zip(dout) {
        *gb += d;
    }
}

/// Mean cross-entropy and its gradient.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParameterVector,
    batch: &LabeledBatch,
) -> Result<(f64, ParameterVector)> {
    let mut grad = vec![0.0; params.len()];
    let loss = evaluate(spec, params, batch, Some(&mut grad))?;
    Ok((loss, ParameterVector::from_vec(grad)))
}

/// Mean cross-entropy without the backward pass.
pub fn predict_loss(spec: &ModelSpec, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64> {
    evaluate(spec, params, batch, None)
}

pub fn logits(spec: &ModelSpec, params: &ParameterVector, x: &[f64]) -> Vec<f64> {
    let (first, second) = split_layers(spec, params.as_slice());
    let mut out = vec![0.0; spec.num_classes];
    match second {
        None => first.forward(x, &mut out),
        Some(out_layer) => {
            let mut hidden = vec![0.0; spec.hidden_dim];
            first.forward(x, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = h.max(0.0));
            out_layer.forward(&hidden, &mut out);
        }
    }
    out
}

/// Fraction of samples whose argmax logit (lowest index on ties) is the label.
pub fn accuracy(spec: &ModelSpec, params: &ParameterVector, batch: &LabeledBatch) -> Result<f64> {
    check_inputs(spec, params, batch)?;
    let correct = (0..batch.len())
        .filter(|&s| {
            let z = logits(spec, params, batch.input(s));
            let mut best = 0;
            for k in 1..z.len() {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best == batch.labels()[s]
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}
