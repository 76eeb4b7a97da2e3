//! Mask-aware adaptive momentum.
//!
//! An Adam-style optimizer that keeps two independent sets of moment buffers
//! and step counters, one for the personalized coordinates and one for the
//! shared coordinates. A step in one phase only touches the coordinates its
//! phase mask selects, and never reads or writes the other phase's buffers.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::param::{mask_complement, Mask, ParameterVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Personalized,
    Shared,
}

impl Phase {
    pub(crate) fn key(self) -> u64 {
        match self {
            Phase::Personalized => 0,
            Phase::Shared => 1,
        }
    }
}

/// `m` for the personalized phase, `1 - m` for the shared phase.
pub fn phase_mask(m: &Mask, phase: Phase) -> Mask {
    match phase {
        Phase::Personalized => m.clone(),
        Phase::Shared => mask_complement(m),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MamoConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decay moments at unselected coordinates instead of freezing them.
    pub literal_decay: bool,
}

impl Default for MamoConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            literal_decay: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self {
            first: vec![0.0; dim],
            second: vec![0.0; dim],
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MamoState {
    pub config: MamoConfig,
    pub personalized: Moments,
    pub shared: Moments,
}

impl MamoState {
    pub fn new(dim: usize, config: MamoConfig) -> Self {
        Self {
            config,
            personalized: Moments::new(dim),
            shared: Moments::new(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.personalized.first.len()
    }

    pub fn moments(&self, phase: Phase) -> &Moments {
        match phase {
            Phase::Personalized => &self.personalized,
            Phase::Shared => &self.shared,
        }
    }

    /// One masked update of `params` in place.
    ///
    /// On error (length mismatch or a non-finite gradient) neither `params`
    /// nor the state is modified.
    pub fn apply_step(
        &mut self,
        params: &mut ParameterVector,
        grad: &ParameterVector,
        mask: &Mask,
        phase: Phase,
    ) -> Result<()> {
        let dim = self.dim();
        check_len(dim, params.len())?;
        check_len(dim, grad.len())?;
        check_len(dim, mask.len())?;
        if !grad.is_finite() {
            return Err(Error::Numeric("non-finite gradient passed to optimizer".into()));
        }

        let MamoConfig {
            lr,
            beta1,
            beta2,
            epsilon,
            literal_decay,
        } = self.config;
        // The personalized phase selects m, the shared phase selects 1 - m.
        let select = phase == Phase::Personalized;
        let moments = match phase {
            Phase::Personalized => &mut self.personalized,
            Phase::Shared => &mut self.shared,
        };
        moments.step += 1;
        let t = moments.step as i32;
        let correct1 = 1.0 - beta1.powi(t);
        let correct2 = 1.0 - beta2.powi(t);

        let w = params.as_mut_slice();
        for i in 0..dim {
            let (u, v) = (&mut moments.first[i], &mut moments.second[i]);
            if mask.get(i) != select {
                if literal_decay {
                    *u *= beta1;
                    *v *= beta2;
                }
                continue;
            }
            let q = grad[i];
            *u = beta1 * *u + (1.0 - beta1) * q;
            *v = beta2 * *v + (1.0 - beta2) * q * q;
            let u_hat = *u / correct1;
            let v_hat = *v / correct2;
            w[i] -= lr * u_hat / (v_hat.sqrt() + epsilon);
        }
        Ok(())
    }
}
