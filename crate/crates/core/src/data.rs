//! Synthetic data and label-skewed client partitions.
//!
//! The pool is a Gaussian mixture with one component per class. Partitioning
//! hands each client `s` classes and a fixed number of train and test samples
//! per class; no pool sample is given out twice.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::rng::{self, Rng};

pub const MAX_MEAN_TRIES: usize = 1000;

/// Labeled sample pool from which client datasets are carved.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    pub data: LabeledBatch,
    pub num_classes: usize,
    /// Class centers for synthetic pools; empty for imported data.
    pub means: Vec<Vec<f64>>,
}

impl Pool {
    pub fn from_batch(data: LabeledBatch, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = data.labels().iter().find(|&&y| y >= num_classes) {
            return Err(Error::arg(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Self {
            data,
            num_classes,
            means: Vec::new(),
        })
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.data
            .labels()
            .iter()
            .enumerate()
            .filter_map(|(i, &y)| (y == class).then_some(i))
            .collect()
    }
}

fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Gaussian-mixture pool: class means ~ N(0, I), samples ~ N(mean, noise² I).
///
/// Means are placed one at a time and redrawn until they sit at least
/// `2 * noise_scale` from every earlier mean.
pub fn gen_synthetic(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    seed: u64,
    noise_scale: f64,
) -> Result<Pool> {
    if num_classes == 0 || input_dim == 0 || samples_per_class == 0 {
        return Err(Error::arg("gen_synthetic counts must all be >= 1"));
    }
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::arg("noise_scale must be finite and >= 0"));
    }
    let mut rng = rng::keyed(seed, &[rng::TAG_DATA, 0]);
    let min_distance = 2.0 * noise_scale;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        let mut placed = false;
        for _ in 0..MAX_MEAN_TRIES {
            let candidate: Vec<f64> = (0..input_dim).map(|_| standard_normal(&mut rng)).collect();
            let far_enough = means.iter().all(|m| {
                let d2: f64 = m.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
                d2.sqrt() >= min_distance
            });
            if far_enough {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::ReduceNoise {
                classes: num_classes,
                min_distance,
                tries: MAX_MEAN_TRIES,
            });
        }
    }

    let mut data = LabeledBatch::empty(input_dim);
    let mut x = vec![0.0; input_dim];
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            for (xi, mu) in x.iter_mut().zip(mean) {
                *xi = mu + noise_scale * standard_normal(&mut rng);
            }
            data.push(&x, class);
        }
    }
    Ok(Pool {
        data,
        num_classes,
        means,
    })
}

/// Reads `label,feat_0,...,feat_{D-1}` rows (header required).
pub fn load_csv_pool(path: &Path, num_classes: Option<usize>) -> Result<Pool> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => Error::Csv(e),
        })?;
    let headers = reader.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    let well_formed = headers.get(0) == Some("label")
        && headers
            .iter()
            .skip(1)
            .enumerate()
            .all(|(i, h)| h == format!("feat_{i}"));
    if dim == 0 || !well_formed {
        return Err(Error::arg(format!(
            "{}: header must be `label,feat_0,...,feat_{{D-1}}`",
            path.display()
        )));
    }
    let mut data = LabeledBatch::empty(dim);
    let mut x = vec![0.0; dim];
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let line = row + 2;
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::arg(format!("line {line}: bad label `{}`", &record[0])))?;
        for (j, xi) in x.iter_mut().enumerate() {
            let field = &record[j + 1];
            *xi = field
                .trim()
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::arg(format!("line {line}: bad feature `{field}`")))?;
        }
        data.push(&x, label);
    }
    if data.is_empty() {
        return Err(Error::arg(format!("{}: no samples", path.display())));
    }
    let inferred = data.labels().iter().max().map_or(0, |m| m + 1);
    let num_classes = num_classes.unwrap_or(inferred);
    Pool::from_batch(data, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub train_bound: usize,
    pub test_bound: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Per-client affine input perturbation magnitude; `None` disables it.
    #[serde(default)]
    pub feature_shift: Option<f64>,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::arg("num_clients must be >= 1"));
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.num_classes {
            return Err(Error::arg(format!(
                "classes_per_client must be in [1, {}]",
                self.num_classes
            )));
        }
        if self.train_bound == 0 || self.test_bound == 0 {
            return Err(Error::arg("train_bound and test_bound must be >= 1"));
        }
        if let Some(m) = self.feature_shift {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::arg("feature_shift must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Class sets repeat across clients whenever N·s exceeds C.
    pub fn classes_overlap(&self) -> bool {
        self.num_clients * self.classes_per_client > self.num_classes
    }

    /// Samples per class a pool must hold for this partition to succeed.
    pub fn samples_per_class_needed(&self) -> usize {
        let max_demand = (self.num_clients * self.classes_per_client).div_ceil(self.num_classes);
        max_demand * (self.train_bound + self.test_bound)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    /// Sorted ascending.
    pub class_set: Vec<usize>,
    /// Pool rows used for `train` and `test`, in the same order.
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Round-robin class assignment over a seeded shuffle of the class list.
pub fn assign_classes(spec: &PartitionSpec) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..spec.num_classes).collect();
    order.shuffle(&mut rng::keyed(spec.seed, &[rng::TAG_DATA, 1]));
    (0..spec.num_clients)
        .map(|n| {
            let mut set: Vec<usize> = (0..spec.classes_per_client)
                .map(|j| order[(n * spec.classes_per_client + j) % spec.num_classes])
                .collect();
            set.sort_unstable();
            set
        })
        .collect()
}

pub fn partition(pool: &Pool, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if pool.num_classes != spec.num_classes {
        return Err(Error::arg(format!(
            "pool has {} classes, partition expects {}",
            pool.num_classes, spec.num_classes
        )));
    }
    let assignment = assign_classes(spec);
    let per_client = spec.train_bound + spec.test_bound;

    let mut demand = vec![0usize; spec.num_classes];
    for set in &assignment {
        for &c in set {
            demand[c] += 1;
        }
    }
    let mut available: Vec<Vec<usize>> = (0..spec.num_classes)
        .map(|c| pool.class_indices(c))
        .collect();
    for (class, rows) in available.iter().enumerate() {
        let needed = demand[class] * per_client;
        if rows.len() < needed {
            return Err(Error::Capacity {
                class,
                needed,
                available: rows.len(),
            });
        }
    }
    for (class, rows) in available.iter_mut().enumerate() {
        rows.shuffle(&mut rng::keyed(spec.seed, &[rng::TAG_DATA, 2, class as u64]));
    }

    let mut cursor = vec![0usize; spec.num_classes];
    let mut clients = Vec::with_capacity(spec.num_clients);
    for (n, class_set) in assignment.into_iter().enumerate() {
        let mut train_rows = Vec::with_capacity(spec.classes_per_client * spec.train_bound);
        let mut test_rows = Vec::with_capacity(spec.classes_per_client * spec.test_bound);
        for &c in &class_set {
            let start = cursor[c];
            let rows = &available[c][start..start + per_client];
            train_rows.extend_from_slice(&rows[..spec.train_bound]);
            test_rows.extend_from_slice(&rows[spec.train_bound..]);
            cursor[c] += per_client;
        }
        let mut train = pool.data.select(&train_rows);
        let mut test = pool.data.select(&test_rows);
        if let Some(magnitude) = spec.feature_shift {
            apply_feature_shift(spec.seed, n, magnitude, &mut [&mut train, &mut test]);
        }
        clients.push(ClientDataset {
            train,
            test,
            class_set,
            train_rows,
            test_rows,
        });
    }
    Ok(clients)
}

/// `x ↦ (1 + m·z)·x + m·b` with a client-specific scalar `z` and vector `b`,
/// both standard normal.
fn apply_feature_shift(seed: u64, client: usize, magnitude: f64, batches: &mut [&mut LabeledBatch]) {
    let dim = batches[0].dim();
    let mut rng = rng::keyed(seed, &[rng::TAG_SHIFT, client as u64]);
    let scale = 1.0 + magnitude * standard_normal(&mut rng);
    let offset: Vec<f64> = (0..dim)
        .map(|_| magnitude * standard_normal(&mut rng))
        .collect();
    for batch in batches.iter_mut() {
        for i in 0..batch.len() {
            for (x, b) in batch.input_mut(i).iter_mut().zip(&offset) {
                *x = scale * *x + b;
            }
        }
    }
}
