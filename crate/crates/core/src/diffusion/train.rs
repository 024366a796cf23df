//! Base-model training on the full toy dataset with the standard
//! noise-prediction objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::data::{hflip, ConceptDataset, PALETTES, SHAPES};
use super::schedule::NoiseSchedule;
use crate::error::{input_err, FadeError, Result};
use crate::optim::{clip_gradients_in_place, lr_at, AdamW};
use crate::substrate::{DenoiserNet, NetConfig, Sample};
use crate::unlearn::TrainConfig;

#[derive(Debug, Clone)]
pub struct BaseTrainResult {
    pub net: DenoiserNet,
    /// Unweighted batch-mean noise MSE for every optimizer step.
    pub losses: Vec<f64>,
}

impl BaseTrainResult {
    /// Mean loss over the first and last `window` steps.
    pub fn loss_ends(&self, window: usize) -> (f64, f64) {
        let w = window.clamp(1, self.losses.len().max(1));
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
        (mean(&self.losses[..w.min(self.losses.len())]), mean(&self.losses[self.losses.len().saturating_sub(w)..]))
    }
}

/// Trains a fresh network from `cfg.seed`. Fully deterministic.
///
/// The noise error of each item is weighted by `1 / ab_t` in the gradient,
/// which is the plain squared error of the trunk output against the
/// velocity target. The minimizer is the same as for the unweighted noise
/// loss; the weighting moves effort to the high-noise steps where the
/// condition decides the image.
pub fn train_base(data: &ConceptDataset, net_cfg: NetConfig, sched: &NoiseSchedule, cfg: &TrainConfig) -> Result<BaseTrainResult> {
    cfg.validate()?;
    for s in 0..SHAPES.len() {
        for p in 0..PALETTES.len() {
            if data.cell_count(s, p) == 0 {
                return input_err(format!("dataset has no {} {} images", SHAPES[s], PALETTES[p]));
            }
        }
    }
    if *sched != net_cfg.schedule()? {
        return input_err("noise schedule does not match the network's schedule");
    }
    let mut net = DenoiserNet::new(net_cfg, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba5e);
    let mut opt = AdamW::new(cfg.adamw());
    let side = net_cfg.image_size;
    let pixels = net_cfg.pixels();
    let model: Vec<Vec<f64>> = data.images.iter().map(|i| i.model_space()).collect();
    let conds: Vec<Vec<usize>> = data.images.iter().map(|i| i.cond()).collect();
    let mut losses = Vec::with_capacity(cfg.max_steps);

    for step in 0..cfg.max_steps {
        let mut xs = Vec::with_capacity(cfg.batch_size);
        let mut eps = Vec::with_capacity(cfg.batch_size);
        let mut items = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let i = rng.gen_range(0..data.len());
            let t = rng.gen_range(0..sched.steps());
            let flip = cfg.horizontal_flip && rng.gen_bool(0.5);
            let e: Vec<f64> = (0..pixels).map(|_| rng.sample(StandardNormal)).collect();
            let x0 = if flip { hflip(&model[i], side) } else { model[i].clone() };
            xs.push(sched.forward_diffuse(&x0, t, &e)?);
            eps.push(e);
            items.push((i, t));
        }
        let batch: Vec<Sample> = items.iter().zip(&xs).map(|(&(i, t), x)| Sample { x, t, cond: &conds[i] }).collect();
        let (outs, _) = net.forward_batch::<ChaCha8Rng>(&batch, None, None, false)?;
        let norm = 1.0 / (pixels * cfg.batch_size) as f64;
        let mut loss = 0.0;
        let mut ups = Vec::with_capacity(cfg.batch_size);
        for ((o, e), &(_, t)) in outs.iter().zip(&eps).zip(&items) {
            let mut up = Vec::with_capacity(pixels);
            // 1/ab_t turns the noise error into the trunk's clean-image error
            let w = 1.0 / sched.alpha_bar[t];
            for (a, b) in o.iter().zip(e) {
                let d = a - b;
                loss += d * d * norm;
                up.push(w * 2.0 * d * norm);
            }
            ups.push(up);
        }
        if !loss.is_finite() {
            return Err(FadeError::Training { step, reason: format!("loss is {loss}") });
        }
        losses.push(loss);
        let mut grads = net.backward_batch(&ups)?;
        clip_gradients_in_place(&mut grads, cfg.max_grad_norm)?;
        let lr = lr_at(cfg.learning_rate, cfg.scheduler, cfg.warmup_steps, cfg.max_steps, step);
        opt.step(net.params_mut().iter_mut().map(|p| (p.layer_id.clone(), &mut p.values)), &grads, lr);
    }
    net.clear_tape();
    Ok(BaseTrainResult { net, losses })
}
