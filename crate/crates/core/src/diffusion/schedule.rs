use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Per-timestep diffusion coefficients for a linear β schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return input_err(format!("schedule needs at least 2 steps, got {steps}"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return input_err(format!("need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"));
    }
    let beta: Vec<f64> = (0..steps).map(|t| beta_min + (beta_max - beta_min) * t as f64 / (steps - 1) as f64).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `x_t = sqrt(ᾱ_t)·x0 + sqrt(1−ᾱ_t)·eps`.
    pub fn forward_diffuse(&self, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        if x0.len() != eps.len() {
            return input_err(format!("noise has {} values but the image has {}", eps.len(), x0.len()));
        }
        if t >= self.steps() {
            return input_err(format!("timestep {t} out of range [0, {})", self.steps()));
        }
        let a = self.alpha_bar[t].sqrt();
        let s = (1.0 - self.alpha_bar[t]).sqrt();
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + s * e).collect())
    }

    /// ᾱ_{t-1}, with ᾱ_{-1} = 1.
    pub fn alpha_bar_prev(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }
}
