//! Parameter-wise personalization masks.
//!
//! After local training each client ranks coordinates by how far they moved
//! and promotes the largest movers to personalized, never exceeding the
//! budget `floor(gamma * d)` and never demoting a coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::param::{elementwise_mul, mask_complement, top_k_indices, Mask, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationConfig {
    /// Fraction of `d` that becomes eligible each round.
    pub rate: f64,
    /// Maximum fraction of `d` that may be personalized.
    pub budget: f64,
}

impl PersonalizationConfig {
    pub fn new(rate: f64, budget: f64) -> Result<Self> {
        for (name, v) in [("p", rate), ("gamma", budget)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::arg(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(Self { rate, budget })
    }

    pub fn candidates_per_round(&self, dim: usize) -> usize {
        floor_fraction(self.rate, dim)
    }

    pub fn max_personalized(&self, dim: usize) -> usize {
        floor_fraction(self.budget, dim)
    }
}

// floor(f * d), guarding against products like 0.29 * 100 = 28.999...
fn floor_fraction(f: f64, dim: usize) -> usize {
    let x = f * dim as f64;
    let nearest = x.round();
    let n = if (x - nearest).abs() < 1e-9 * dim.max(1) as f64 {
        nearest
    } else {
        x.floor()
    };
    (n.max(0.0) as usize).min(dim)
}

/// Signed update `before - after` and its magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiff {
    pub signed: ParameterVector,
    pub magnitude: ParameterVector,
}

pub fn param_diff(before: &ParameterVector, after: &ParameterVector) -> Result<ParamDiff> {
    let signed = before.sub(after)?;
    let magnitude = signed.abs();
    Ok(ParamDiff { signed, magnitude })
}

/// Grows `old` by the top `floor(p*d)` coordinates of `magnitude`, clipped to
/// the budget in descending-magnitude order.
pub fn update_mask(
    old: &Mask,
    magnitude: &ParameterVector,
    cfg: &PersonalizationConfig,
) -> Result<Mask> {
    let dim = old.len();
    check_len(dim, magnitude.len())?;
    let budget = cfg.max_personalized(dim);
    let current = old.popcount();
    if current > budget {
        return Err(Error::arg(format!(
            "mask already has {current} personalized coordinates, budget is {budget}"
        )));
    }
    let mut next = old.clone();
    let mut room = budget - current;
    // top_k_indices returns candidates in descending magnitude order
    for i in top_k_indices(magnitude.as_slice(), cfg.candidates_per_round(dim))? {
        if room == 0 {
            break;
        }
        if !next.get(i) {
            next.set(i);
            room -= 1;
        }
    }
    Ok(next)
}

/// `(w ∘ m, w ∘ (1 - m))`: personalized and shared submodels.
pub fn split_model(w: &ParameterVector, m: &Mask) -> Result<(ParameterVector, ParameterVector)> {
    Ok((elementwise_mul(w, m)?, elementwise_mul(w, &mask_complement(m))?))
}
