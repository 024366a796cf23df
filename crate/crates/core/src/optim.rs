//! AdamW with decoupled weight decay, global-norm clipping and learning-rate
//! schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::substrate::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerKind {
    #[default]
    Constant,
    Linear,
    Cosine,
}

/// Learning rate at `step` (0-based) with linear warmup.
pub fn lr_at(base: f64, kind: SchedulerKind, warmup: usize, total: usize, step: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup.min(step)) as f64 / span).min(1.0);
    match kind {
        SchedulerKind::Constant => base,
        SchedulerKind::Linear => base * (1.0 - progress),
        SchedulerKind::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients_in_place(grads: &mut Gradients, max_norm: f64) -> Result<f64> {
    if !(max_norm > 0.0) {
        return input_err(format!("max_grad_norm must be positive, got {max_norm}"));
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    Ok(norm)
}

pub fn clip_gradients(grads: &Gradients, max_norm: f64) -> Result<Gradients> {
    let mut g = grads.clone();
    clip_gradients_in_place(&mut g, max_norm)?;
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient entry. Parameters
    /// without a gradient are left untouched, weight decay included.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Vec<f32>)>, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, p) in params {
            let Some(g) = grads.get(&id) else { continue };
            let m = self.m.entry(id.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p[i] as f64;
                let w = w * (1.0 - lr * c.weight_decay) - lr * mhat / (vhat.sqrt() + c.eps);
                p[i] = w as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grads(vals: &[f64]) -> Gradients {
        let mut g = Gradients::new();
        g.insert("a", vals.to_vec());
        g
    }

    #[test]
    fn clipping_halves_when_norm_is_double() {
        // norm 10
        let g = grads(&[6.0, 8.0]);
        let c = clip_gradients(&g, 5.0).unwrap();
        assert_eq!(c.get("a").unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn clipping_is_a_noop_within_bound() {
        let g = grads(&[0.0, 3.0]);
        assert_eq!(clip_gradients(&g, 5.0).unwrap(), g);
        assert!(clip_gradients(&g, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_is_min_of_norm_and_bound(
            vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
            max in 0.01f64..20.0,
        ) {
            let g = grads(&vals);
            let pre = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
            let post = clip_gradients(&g, max).unwrap().global_norm();
            prop_assert!((post - pre.min(max)).abs() <= 1e-6 * pre.max(1.0));
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let mut opt = AdamW::new(AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 });
        let mut p = vec![0.5f32, -1.25];
        let g = grads(&[1.0, -3.0]);
        opt.step([("a".to_string(), &mut p)], &g, 0.0);
        assert_eq!(p, vec![0.5, -1.25]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = AdamW::new(AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 0.0, weight_decay: 0.0 });
        let mut p = vec![1.0f32];
        opt.step([("a".to_string(), &mut p)], &grads(&[0.3]), 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn schedules() {
        assert_eq!(lr_at(1.0, SchedulerKind::Constant, 0, 10, 7), 1.0);
        assert_eq!(lr_at(1.0, SchedulerKind::Constant, 4, 10, 1), 0.5);
        assert!((lr_at(1.0, SchedulerKind::Cosine, 0, 10, 10)).abs() < 1e-12);
        assert!((lr_at(1.0, SchedulerKind::Linear, 0, 10, 5) - 0.5).abs() < 1e-12);
    }
}
