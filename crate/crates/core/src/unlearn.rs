//! Self-distillation unlearning.
//!
//! The network with its adapter disabled is the teacher; with the adapter
//! enabled it is the student. For retain items the student should match the
//! teacher under the same condition. For forget items the student, prompted
//! with the forget concept, should match the teacher prompted with the
//! overwrite concept. Both sides of an item share one noised input.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{attach, save_adapter, SparseAdapter};
use crate::diffusion::data::{hflip, Concept, ConceptDataset, LabeledImage, Split};
use crate::diffusion::NoiseSchedule;
use crate::error::{input_err, FadeError, Result};
use crate::optim::{clip_gradients_in_place, lr_at, AdamW, AdamWConfig, SchedulerKind};
use crate::saliency::BinaryMask;
use crate::substrate::{DenoiserNet, Sample, ADAPTER_TARGETS};

pub use crate::optim::clip_gradients;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup_steps: usize,
    pub scheduler: SchedulerKind,
    pub max_grad_norm: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub horizontal_flip: bool,
    /// Weight of the forget term relative to the retain term.
    pub forget_weight: f64,
}

impl Default for TrainConfig {
    /// The benchmark unlearning settings.
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-2,
            batch_size: 4,
            max_steps: 1550,
            warmup_steps: 0,
            scheduler: SchedulerKind::Constant,
            max_grad_norm: 5.0,
            checkpoint_every: 100,
            seed: 0,
            horizontal_flip: true,
            forget_weight: 1.0,
        }
    }
}

impl TrainConfig {
    /// Settings for training the base denoiser from scratch.
    pub fn base_default() -> Self {
        Self {
            learning_rate: 2e-3,
            weight_decay: 0.0,
            batch_size: 32,
            max_steps: 4000,
            warmup_steps: 100,
            scheduler: SchedulerKind::Cosine,
            max_grad_norm: 1.0,
            checkpoint_every: 1000,
            seed: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FadeError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be a nonnegative number, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be at least 1".into());
        }
        if !(self.max_grad_norm > 0.0) {
            return bad(format!("max_grad_norm must be positive, got {}", self.max_grad_norm));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.forget_weight >= 0.0) {
            return bad("forget_weight must be nonnegative".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps, weight_decay: self.weight_decay }
    }
}

/// Shape of the adapter attached for an unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    pub init_seed: u64,
    pub targets: Vec<String>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0, dropout: 0.2, init_seed: 0, targets: ADAPTER_TARGETS.iter().map(|s| s.to_string()).collect() }
    }
}

impl AdapterConfig {
    pub fn attach(&self, net: &DenoiserNet, mask: Option<&BinaryMask>) -> Result<SparseAdapter> {
        let targets: Vec<&str> = self.targets.iter().map(|s| s.as_str()).collect();
        attach(net, &targets, self.rank, self.alpha, self.dropout, self.init_seed, mask)
    }
}

/// The concept that replaces the forgotten one in the teacher's prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverwriteSpec {
    pub forget: Concept,
    pub overwrite: Concept,
}

impl OverwriteSpec {
    pub fn new(forget: Concept, overwrite: Concept) -> Result<Self> {
        if forget.attribute != overwrite.attribute {
            return Err(FadeError::Config(format!(
                "overwrite concept {overwrite} must be of the same kind as the forget concept {forget}"
            )));
        }
        if forget == overwrite {
            return Err(FadeError::Config(format!("overwrite concept equals the forget concept {forget}")));
        }
        Ok(Self { forget, overwrite })
    }

    pub fn name(&self) -> &'static str {
        self.overwrite.name()
    }

    /// Teacher prompt for a forget item: the forget token is swapped for the
    /// overwrite token, the rest of the condition is kept.
    pub fn teacher_cond(&self, cond: &[usize]) -> Vec<usize> {
        let mut c = cond.to_vec();
        let pos = self.forget.attribute.token_position();
        if c.get(pos) == Some(&self.forget.token()) {
            c[pos] = self.overwrite.token();
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub retain_term: f64,
    pub forget_term: f64,
    /// `retain_term + forget_weight · forget_term`.
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// One noised item shared between teacher and student.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedItem {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
    pub student_cond: Vec<usize>,
    pub teacher_cond: Vec<usize>,
}

/// Draws fresh `(t, ε)` and an optional flip per item.
pub fn draw_items(
    retain: &[&LabeledImage],
    forget: &[&LabeledImage],
    overwrite: &OverwriteSpec,
    sched: &NoiseSchedule,
    flip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<NoisedItem>, Vec<NoisedItem>)> {
    let mut make = |img: &LabeledImage, teacher: Vec<usize>| -> Result<NoisedItem> {
        let side = (img.pixels.len() as f64).sqrt() as usize;
        let t = rng.gen_range(0..sched.steps());
        let mut x0 = img.model_space();
        if flip && rng.gen_bool(0.5) {
            x0 = hflip(&x0, side);
        }
        let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = sched.forward_diffuse(&x0, t, &eps)?;
        Ok(NoisedItem { x_t, t, eps, student_cond: img.cond(), teacher_cond: teacher })
    };
    let r = retain.iter().map(|i| make(i, i.cond())).collect::<Result<Vec<_>>>()?;
    let f = forget.iter().map(|i| make(i, overwrite.teacher_cond(&i.cond()))).collect::<Result<Vec<_>>>()?;
    Ok((r, f))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Teacher outputs with the adapter switched off. Never builds a tape.
fn teacher_outputs(net: &DenoiserNet, ad: &mut SparseAdapter, items: &[NoisedItem]) -> Result<Vec<Vec<f64>>> {
    ad.set_enabled(false);
    let out = items.iter().map(|it| net.infer(&it.x_t, it.t, &it.teacher_cond, Some(ad), false).map(|o| o.0)).collect();
    ad.set_enabled(true);
    out
}

/// Losses of the student against the teacher on prepared items, without
/// any update.
pub fn distill_losses(
    net: &DenoiserNet,
    ad: &mut SparseAdapter,
    retain: &[NoisedItem],
    forget: &[NoisedItem],
    forget_weight: f64,
) -> Result<LossBreakdown> {
    let tr = teacher_outputs(net, ad, retain)?;
    let tf = teacher_outputs(net, ad, forget)?;
    let student = |it: &NoisedItem| net.infer(&it.x_t, it.t, &it.student_cond, Some(ad), false).map(|o| o.0);
    let mut r = 0.0;
    for (it, t) in retain.iter().zip(&tr) {
        r += mse(&student(it)?, t) / retain.len() as f64;
    }
    let mut f = 0.0;
    for (it, t) in forget.iter().zip(&tf) {
        f += mse(&student(it)?, t) / forget.len() as f64;
    }
    Ok(LossBreakdown { retain_term: r, forget_term: f, total: r + forget_weight * f, grad_norm: 0.0 })
}

/// One optimizer step on prepared items. `net` must have its base weights
/// frozen; only the adapter factors move.
#[allow(clippy::too_many_arguments)]
pub fn distill_update(
    net: &mut DenoiserNet,
    ad: &mut SparseAdapter,
    retain: &[NoisedItem],
    forget: &[NoisedItem],
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if !ad.is_enabled() {
        return Err(FadeError::State("the adapter must be enabled for a distillation step".into()));
    }
    if ad.is_merged() {
        return Err(FadeError::State("cannot train a merged adapter".into()));
    }
    if retain.is_empty() || forget.is_empty() {
        return input_err("distillation needs nonempty retain and forget batches");
    }
    let tr = teacher_outputs(net, ad, retain)?;
    let tf = teacher_outputs(net, ad, forget)?;

    let batch: Vec<Sample> = retain.iter().chain(forget).map(|it| Sample { x: &it.x_t, t: it.t, cond: &it.student_cond }).collect();
    let uses_dropout = ad.layers().any(|l| l.dropout > 0.0);
    let (outs, _) = net.forward_batch(&batch, Some(&*ad), if uses_dropout { Some(&mut *rng) } else { None }, false)?;

    let pixels = outs[0].len() as f64;
    let mut retain_term = 0.0;
    let mut forget_term = 0.0;
    let mut ups = Vec::with_capacity(outs.len());
    for (k, out) in outs.iter().enumerate() {
        let (teacher, weight, n, acc) = if k < retain.len() {
            (&tr[k], 1.0, retain.len() as f64, &mut retain_term)
        } else {
            (&tf[k - retain.len()], cfg.forget_weight, forget.len() as f64, &mut forget_term)
        };
        *acc += mse(out, teacher) / n;
        ups.push(out.iter().zip(teacher).map(|(s, t)| weight * 2.0 * (s - t) / (pixels * n)).collect());
    }
    let total = retain_term + cfg.forget_weight * forget_term;
    if !total.is_finite() {
        return Err(FadeError::Training { step, reason: format!("distillation loss is {total}") });
    }
    let mut grads = net.backward_batch(&ups)?;
    net.clear_tape();
    grads.retain(|k| k.ends_with(".lora_a") || k.ends_with(".lora_b"));
    let grad_norm = clip_gradients_in_place(&mut grads, cfg.max_grad_norm)?;
    if !grad_norm.is_finite() {
        return Err(FadeError::Training { step, reason: "non-finite gradient norm".into() });
    }
    let lr = lr_at(cfg.learning_rate, cfg.scheduler, cfg.warmup_steps, cfg.max_steps, step);
    opt.step(ad.params_mut(), &grads, lr);
    Ok(LossBreakdown { retain_term, forget_term, total, grad_norm })
}

/// Draws noise for the given batches and applies one update.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    net: &mut DenoiserNet,
    ad: &mut SparseAdapter,
    batch_r: &[&LabeledImage],
    batch_f: &[&LabeledImage],
    overwrite: &OverwriteSpec,
    sched: &NoiseSchedule,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    if !ad.is_enabled() {
        return Err(FadeError::State("the adapter must be enabled for a distillation step".into()));
    }
    let (r, f) = draw_items(batch_r, batch_f, overwrite, sched, cfg.horizontal_flip, rng)?;
    distill_update(net, ad, &r, &f, opt, cfg, step, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub retain: f64,
    pub forget: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct UnlearnResult {
    pub adapter: SparseAdapter,
    /// Snapshots at step 0, every `checkpoint_every` steps, and the end.
    pub checkpoints: Vec<(usize, SparseAdapter)>,
    pub curve: Vec<LossRow>,
}

impl UnlearnResult {
    pub fn write_curve(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| FadeError::Format(e.to_string()))?;
        for row in &self.curve {
            w.serialize(row).map_err(|e| FadeError::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `adapter.fade`, `losses.csv` and `checkpoints/step_NNNNN.fade`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let ck = dir.join("checkpoints");
        std::fs::create_dir_all(&ck)?;
        save_adapter(&self.adapter, dir.join("adapter.fade"))?;
        for (step, ad) in &self.checkpoints {
            save_adapter(ad, ck.join(format!("step_{step:05}.fade")))?;
        }
        self.write_curve(dir.join("losses.csv"))
    }
}

/// Attaches an adapter to a frozen copy of `base` and distils for
/// `cfg.max_steps` steps. `base` itself is never modified.
pub fn run_unlearning(
    base: &DenoiserNet,
    data: &ConceptDataset,
    overwrite: &OverwriteSpec,
    mask: Option<&BinaryMask>,
    adapter_cfg: &AdapterConfig,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<UnlearnResult> {
    cfg.validate()?;
    if overwrite.forget != data.forget {
        return input_err(format!("dataset forgets {} but the run forgets {}", data.forget, overwrite.forget));
    }
    let forget = data.forget_set();
    let retain = data.retain_set();
    if forget.is_empty() || retain.is_empty() {
        return input_err("both the forget and the retain split must be nonempty");
    }
    if !retain.iter().any(|i| overwrite.overwrite.matches(i.shape, i.palette)) {
        return input_err(format!("overwrite concept {} is absent from the retain split", overwrite.overwrite));
    }
    debug_assert!(forget.iter().all(|i| data.split_of(i) == Split::Forget));

    let mut net = base.clone();
    net.set_requires_grad(false);
    let mut ad = adapter_cfg.attach(&net, mask)?;
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut checkpoints = vec![(0, ad.clone())];
    let mut curve = Vec::with_capacity(cfg.max_steps);

    for step in 0..cfg.max_steps {
        let br: Vec<&LabeledImage> = (0..cfg.batch_size).map(|_| retain[rng.gen_range(0..retain.len())]).collect();
        let bf: Vec<&LabeledImage> = (0..cfg.batch_size).map(|_| forget[rng.gen_range(0..forget.len())]).collect();
        let l = distill_step(&mut net, &mut ad, &br, &bf, overwrite, sched, &mut opt, cfg, step, &mut rng)?;
        curve.push(LossRow { step, retain: l.retain_term, forget: l.forget_term, total: l.total, grad_norm: l.grad_norm });
        let done = step + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.max_steps {
            checkpoints.push((done, ad.clone()));
        }
    }
    Ok(UnlearnResult { adapter: ad, checkpoints, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::DatasetSpec;
    use crate::diffusion::make_schedule;
    use crate::substrate::NetConfig;

    fn setup() -> (DenoiserNet, ConceptDataset, NoiseSchedule) {
        let cfg = NetConfig { timesteps: 20, beta_max: 0.2, ..NetConfig::default() };
        let net = DenoiserNet::new(cfg, 4).unwrap();
        let ds = ConceptDataset::generate(&DatasetSpec { per_cell: 2, ..DatasetSpec::default() }, Concept::shape(0)).unwrap();
        (net, ds, make_schedule(20, 1e-3, 0.2).unwrap())
    }

    fn ow() -> OverwriteSpec {
        OverwriteSpec::new(Concept::shape(0), Concept::shape(1)).unwrap()
    }

    #[test]
    fn teacher_cond_swaps_only_the_forget_token() {
        let o = ow();
        assert_eq!(o.teacher_cond(&[0, 1, 7]), vec![0, 2, 7]);
        assert_eq!(o.teacher_cond(&[0, 3, 7]), vec![0, 3, 7]);
        assert!(OverwriteSpec::new(Concept::shape(0), Concept::palette(1)).is_err());
        assert!(OverwriteSpec::new(Concept::shape(0), Concept::shape(0)).is_err());
    }

    #[test]
    fn step_zero_identities() {
        let (base, ds, s) = setup();
        let mut net = base.clone();
        net.set_requires_grad(false);
        let mut ad = AdapterConfig::default().attach(&net, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let retain = ds.retain_set();
        let forget = ds.forget_set();
        let (r, f) = draw_items(&retain[..4], &forget[..4], &ow(), &s, true, &mut rng).unwrap();
        let mut opt = AdamW::new(TrainConfig::default().adamw());
        let l = distill_update(&mut net, &mut ad, &r, &f, &mut opt, &TrainConfig::default(), 0, &mut rng).unwrap();
        assert_eq!(l.retain_term, 0.0);
        // two plain forwards of the base net
        let mut expect = 0.0;
        for it in &f {
            let (a, _) = base.infer(&it.x_t, it.t, &it.teacher_cond, None, false).unwrap();
            let (b, _) = base.infer(&it.x_t, it.t, &it.student_cond, None, false).unwrap();
            expect += a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64 / f.len() as f64;
        }
        assert!((l.forget_term - expect).abs() <= 1e-12 * expect.max(1.0), "{} vs {expect}", l.forget_term);
        assert!(expect > 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (base, ds, s) = setup();
        let mut net = base.clone();
        net.set_requires_grad(false);
        let mut ad = AdapterConfig::default().attach(&net, None).unwrap();
        let before = ad.clone();
        let cfg = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(cfg.adamw());
        let (retain, forget) = (ds.retain_set(), ds.forget_set());
        let mut losses = Vec::new();
        for _ in 0..2 {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            losses.push(distill_step(&mut net, &mut ad, &retain[..3], &forget[..3], &ow(), &s, &mut opt, &cfg, 0, &mut rng).unwrap());
        }
        assert_eq!(ad, before);
        assert_eq!(losses[0], losses[1]);
    }

    #[test]
    fn disabled_adapter_is_a_state_error() {
        let (base, ds, s) = setup();
        let mut net = base.clone();
        let mut ad = AdapterConfig::default().attach(&net, None).unwrap();
        ad.set_enabled(false);
        let mut opt = AdamW::new(TrainConfig::default().adamw());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (retain, forget) = (ds.retain_set(), ds.forget_set());
        let r = distill_step(&mut net, &mut ad, &retain[..1], &forget[..1], &ow(), &s, &mut opt, &TrainConfig::default(), 0, &mut rng);
        assert!(matches!(r, Err(FadeError::State(_))));
    }

    #[test]
    fn teacher_passes_leave_no_gradient_state() {
        let (base, ds, s) = setup();
        let net = base.clone();
        let mut ad = AdapterConfig::default().attach(&net, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (r, _) = draw_items(&ds.retain_set()[..2], &ds.forget_set()[..2], &ow(), &s, false, &mut rng).unwrap();
        teacher_outputs(&net, &mut ad, &r).unwrap();
        assert!(!net.has_tape());
        assert!(ad.is_enabled());
    }

    #[test]
    fn zero_steps_returns_initial_adapter_and_keeps_base() {
        let (base, ds, s) = setup();
        let cfg = TrainConfig { max_steps: 0, ..TrainConfig::default() };
        let res = run_unlearning(&base, &ds, &ow(), None, &AdapterConfig::default(), &cfg, &s).unwrap();
        assert_eq!(res.checkpoints.len(), 1);
        for id in res.adapter.layer_ids() {
            assert!(res.adapter.effective_delta(&id).unwrap().data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn short_run_is_deterministic_and_checkpoints_on_schedule() {
        let (base, ds, s) = setup();
        let snapshot = base.clone();
        let cfg = TrainConfig { max_steps: 7, checkpoint_every: 3, learning_rate: 1e-3, ..TrainConfig::default() };
        let a = run_unlearning(&base, &ds, &ow(), None, &AdapterConfig::default(), &cfg, &s).unwrap();
        let b = run_unlearning(&base, &ds, &ow(), None, &AdapterConfig::default(), &cfg, &s).unwrap();
        assert_eq!(a.adapter.to_bytes(), b.adapter.to_bytes());
        assert_eq!(a.curve, b.curve);
        let steps: Vec<usize> = a.checkpoints.iter().map(|c| c.0).collect();
        assert_eq!(steps, vec![0, 3, 6, 7]);
        assert_eq!(base, snapshot);
        assert_eq!(a.curve[0].retain, 0.0);
    }

    #[test]
    fn mismatched_forget_concept_rejected() {
        let (base, ds, s) = setup();
        let o = OverwriteSpec::new(Concept::shape(2), Concept::shape(1)).unwrap();
        assert!(run_unlearning(&base, &ds, &o, None, &AdapterConfig::default(), &TrainConfig::default(), &s).is_err());
    }
}
