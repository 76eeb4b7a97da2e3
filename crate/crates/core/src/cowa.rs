//! Contribution scores and aggregation weights.
//!
//! Each client is scored twice against the aggregate with its own share
//! removed: once by how far its update direction departs from everyone
//! else's (`1 - cos`), and once by how badly the everyone-else model fits the
//! client's own data. The two scores are summed and normalized onto the
//! simplex to give next round's aggregation weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_loss, LabeledBatch, ModelSpec};
use crate::param::{cosine_similarity, ParameterVector};

/// Leave-one-out is refused once a single client holds this much weight.
pub const ALPHA_EPS: f64 = 1e-6;
/// Below this total, weights fall back to uniform.
pub const TOTAL_EPS: f64 = 1e-12;

/// Score used for a client whose leave-one-out quantities are undefined.
pub const NEUTRAL_GRAD_SCORE: f64 = 1.0;

/// `(aggregate - alpha * own) / (1 - alpha)`.
fn remove_share(aggregate: &ParameterVector, own: &ParameterVector, alpha: f64) -> Result<ParameterVector> {
    if alpha.is_nan() || alpha < 0.0 {
        return Err(Error::arg(format!("weight {alpha} must be >= 0")));
    }
    if alpha >= 1.0 - ALPHA_EPS {
        return Err(Error::DegenerateLeaveOneOut { alpha });
    }
    let mut out = aggregate.clone();
    out.axpy(-alpha, own)?;
    Ok(out.scale(1.0 / (1.0 - alpha)))
}

/// Average update direction of every client except this one.
pub fn leave_one_out_direction(
    delta_global: &ParameterVector,
    delta_n: &ParameterVector,
    alpha_n: f64,
) -> Result<ParameterVector> {
    remove_share(delta_global, delta_n, alpha_n)
}

/// Aggregate model with this client's weighted share removed.
pub fn leave_one_out_model(
    w_global: &ParameterVector,
    w_n: &ParameterVector,
    alpha_n: f64,
) -> Result<ParameterVector> {
    remove_share(w_global, w_n, alpha_n)
}

/// `1 - cos(delta_n, delta_loo)` in `[0, 2]`; 1 when either direction is zero.
pub fn gradient_score(delta_n: &ParameterVector, delta_loo: &ParameterVector) -> Result<f64> {
    let cos = cosine_similarity(delta_n, delta_loo)?;
    if cos.degenerate {
        return Ok(NEUTRAL_GRAD_SCORE);
    }
    Ok(1.0 - cos.value)
}

/// Mean loss of the leave-one-out model on the client's own data.
pub fn prediction_score(spec: &ModelSpec, w_loo: &ParameterVector, data: &LabeledBatch) -> Result<f64> {
    predict_loss(spec, w_loo, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub client_id: usize,
    pub gamma_grad: f64,
    pub gamma_data: f64,
    pub gamma_total: f64,
    pub alpha: f64,
}

/// Sums each `(gamma_grad, gamma_data)` pair and normalizes the totals.
/// Totals summing to (almost) zero give uniform weights.
pub fn combine_and_normalize(scores: &[(f64, f64)]) -> Result<Vec<ContributionReport>> {
    if scores.is_empty() {
        return Err(Error::arg("no contribution scores to normalize"));
    }
    for (i, &(g, d)) in scores.iter().enumerate() {
        if !(g.is_finite() && d.is_finite() && g >= 0.0 && d >= 0.0) {
            return Err(Error::arg(format!(
                "client {i}: scores ({g}, {d}) must be finite and >= 0"
            )));
        }
    }
    let totals: Vec<f64> = scores.iter().map(|(g, d)| g + d).collect();
    let sum: f64 = totals.iter().sum();
    let n = scores.len() as f64;
    Ok(scores
        .iter()
        .zip(&totals)
        .enumerate()
        .map(|(client_id, (&(gamma_grad, gamma_data), &gamma_total))| ContributionReport {
            client_id,
            gamma_grad,
            gamma_data,
            gamma_total,
            alpha: if sum < TOTAL_EPS { 1.0 / n } else { gamma_total / sum },
        })
        .collect())
}

/// Which score components feed the weights, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub use_grad: bool,
    pub use_data: bool,
    /// Min-max rescale each component across clients before summing.
    pub normalize_components: bool,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            use_grad: true,
            use_data: true,
            normalize_components: false,
        }
    }
}

fn min_max(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span < TOTAL_EPS { 0.0 } else { (*v - lo) / span };
    }
}

/// Applies [`ScoreOptions`] to raw per-client scores, then normalizes.
/// Disabled components are reported as zero.
pub fn weights_from_scores(raw: &[(f64, f64)], opts: ScoreOptions) -> Result<Vec<ContributionReport>> {
    let mut grad: Vec<f64> = raw
        .iter()
        .map(|&(g, _)| if opts.use_grad { g } else { 0.0 })
        .collect();
    let mut data: Vec<f64> = raw
        .iter()
        .map(|&(_, d)| if opts.use_data { d } else { 0.0 })
        .collect();
    if opts.normalize_components && !raw.is_empty() {
        min_max(&mut grad);
        min_max(&mut data);
    }
    let combined: Vec<(f64, f64)> = grad.into_iter().zip(data).collect();
    combine_and_normalize(&combined)
}
