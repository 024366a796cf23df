//! The toy conditional denoiser.
//!
//! Patchified image tokens receive a positional and a timestep embedding,
//! attend once to the condition-token embeddings through multi-head
//! cross-attention, pass through two residual MLP blocks and are projected
//! back to patch pixels. The first MLP block mixes along the token axis so
//! that every patch sees the whole image; the second mixes channels.
//!
//! The trunk output `F` is turned into a noise prediction with the
//! schedule-dependent skip `eps_hat = sqrt(1 - ab_t) * x_t + sqrt(ab_t) * F`.
//! At high noise the skip carries the identity part and `F` only has to
//! describe the clean image, which keeps the condition pathway easy to
//! learn for a network this small.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{self, LayerNormCache};
use super::tensor::{Gradients, Mat, ParamStore, ParamTensor};
use crate::adapter::{LoraRuntime, SparseAdapter};
use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{input_err, FadeError, Result};

/// Id of the single cross-attention instance, as reported in attention records.
pub const CROSS_ATTN_LAYER: &str = "attn";

/// Index of the dense block that mixes information across image tokens
/// rather than across channels.
pub const TOKEN_MIX_BLOCK: usize = 0;

/// Weight tensors that may carry an adapter.
pub const ADAPTER_TARGETS: [&str; 8] = [
    "attn.q.weight",
    "attn.k.weight",
    "attn.v.weight",
    "attn.o.weight",
    "mlp1.fc1.weight",
    "mlp1.fc2.weight",
    "mlp2.fc1.weight",
    "mlp2.fc2.weight",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub timesteps: usize,
    pub vocab: usize,
    pub cond_len: usize,
    /// Linear noise schedule the network is trained and sampled with. The
    /// default range leaves `ab` near 0.006 at the last step, so sampling
    /// can start from pure noise.
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            patch: 2,
            dim: 32,
            heads: 4,
            mlp_hidden: 64,
            timesteps: 100,
            vocab: 9,
            cond_len: 3,
            beta_min: 1e-3,
            beta_max: 0.1,
        }
    }
}

impl NetConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn pixels(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return input_err("patch size must divide the image size");
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return input_err("heads must divide the model dimension");
        }
        if !self.dim.is_multiple_of(2) {
            return input_err("model dimension must be even for sinusoidal time features");
        }
        if self.timesteps == 0 || self.vocab == 0 || self.cond_len == 0 || self.mlp_hidden == 0 {
            return input_err("network sizes must be positive");
        }
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.beta_min, self.beta_max)
    }

    pub(crate) fn to_meta(self) -> Vec<f64> {
        let mut v: Vec<f64> =
            [self.image_size, self.patch, self.dim, self.heads, self.mlp_hidden, self.timesteps, self.vocab, self.cond_len]
                .iter()
                .map(|&v| v as f64)
                .collect();
        v.extend([self.beta_min, self.beta_max]);
        v
    }

    pub(crate) fn from_meta(v: &[f64]) -> Result<Self> {
        if v.len() != 10 {
            return Err(FadeError::Format("network config record must have 10 entries".into()));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = Self {
            image_size: u(0),
            patch: u(1),
            dim: u(2),
            heads: u(3),
            mlp_hidden: u(4),
            timesteps: u(5),
            vocab: u(6),
            cond_len: u(7),
            beta_min: v[8],
            beta_max: v[9],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One head of the cross-attention map for one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer_id: String,
    pub head: usize,
    pub t: usize,
    /// Rows are image tokens, columns are condition tokens.
    pub weights: Mat,
}

/// A dense layer resolved for one forward pass.
#[derive(Debug, Clone)]
struct DenseRt {
    name: &'static str,
    out: usize,
    inp: usize,
    /// Base weight, or base + adapter delta when the adapter path is folded in.
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    lora: Option<LoraRuntime>,
}

#[derive(Debug, Clone)]
struct NormRt {
    name: &'static str,
    gain: Vec<f64>,
    bias: Vec<f64>,
}

/// Network weights widened to 64-bit with any active adapter resolved in.
/// Immutable, so it can be shared across threads for inference.
#[derive(Debug, Clone)]
pub struct ResolvedNet {
    cfg: NetConfig,
    patch_embed: DenseRt,
    pos_embed: Vec<f64>,
    time_proj: DenseRt,
    token_embed: Vec<f64>,
    attn_norm: NormRt,
    q: DenseRt,
    k: DenseRt,
    v: DenseRt,
    o: DenseRt,
    mlp: [(NormRt, DenseRt, DenseRt); 2],
    out_norm: NormRt,
    out_proj: DenseRt,
    /// `(sqrt(ab_t), sqrt(1 - ab_t))` per timestep for the output skip.
    skip: Vec<(f64, f64)>,
    /// Train-time dropout on adapter inputs is active.
    dropout: bool,
}

#[derive(Debug, Clone)]
struct DenseTape {
    x: Mat,
    /// Adapter-path input and its per-entry dropout scale (0 or 1/(1-p)).
    x_drop: Option<(Mat, Vec<f64>)>,
}

#[derive(Debug, Clone)]
struct MlpTape {
    ln: LayerNormCache,
    fc1: DenseTape,
    z: Mat,
    fc2: DenseTape,
}

#[derive(Debug, Clone)]
struct SampleTape {
    t: usize,
    cond: Vec<usize>,
    patch: DenseTape,
    time: DenseTape,
    attn_ln: LayerNormCache,
    q_in: DenseTape,
    k_in: DenseTape,
    v_in: DenseTape,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    o_in: DenseTape,
    mlp: Vec<MlpTape>,
    out_ln: LayerNormCache,
    out_in: DenseTape,
}

#[derive(Debug, Clone)]
struct Tape {
    resolved: ResolvedNet,
    samples: Vec<SampleTape>,
}

/// One input to a batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub t: usize,
    pub cond: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct DenoiserNet {
    cfg: NetConfig,
    params: ParamStore,
    tape: Option<Tape>,
}

impl PartialEq for DenoiserNet {
    fn eq(&self, other: &Self) -> bool {
        self.cfg == other.cfg && self.params == other.params
    }
}

impl DenoiserNet {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let h = cfg.mlp_hidden;
        let pd = cfg.patch_dim();
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut ps = ParamStore::new();
        let mut add = |p: ParamTensor| ps.insert(p);
        add(ParamTensor::gaussian("patch_embed.weight", vec![d, pd], inv(pd), &mut rng))?;
        add(ParamTensor::zeros("patch_embed.bias", vec![d]))?;
        add(ParamTensor::gaussian("pos_embed", vec![cfg.tokens(), d], 0.3, &mut rng))?;
        add(ParamTensor::gaussian("time_proj.weight", vec![d, d], inv(d), &mut rng))?;
        add(ParamTensor::zeros("time_proj.bias", vec![d]))?;
        add(ParamTensor::gaussian("token_embed", vec![cfg.vocab, d], 1.0, &mut rng))?;
        add(ParamTensor::filled("attn.norm.gain", vec![d], 1.0))?;
        add(ParamTensor::zeros("attn.norm.bias", vec![d]))?;
        // small query/key weights start every head near uniform attention
        let qk = 0.1;
        add(ParamTensor::gaussian("attn.q.weight", vec![d, d], qk * inv(d), &mut rng))?;
        add(ParamTensor::gaussian("attn.k.weight", vec![d, d], qk * inv(d), &mut rng))?;
        add(ParamTensor::gaussian("attn.v.weight", vec![d, d], inv(d), &mut rng))?;
        add(ParamTensor::gaussian("attn.o.weight", vec![d, d], 0.5 * inv(d), &mut rng))?;
        add(ParamTensor::zeros("attn.o.bias", vec![d]))?;
        for (i, blk) in ["mlp1", "mlp2"].into_iter().enumerate() {
            // the token-mixing block acts along the token axis
            let width = if i == TOKEN_MIX_BLOCK { cfg.tokens() } else { d };
            add(ParamTensor::filled(format!("{blk}.norm.gain"), vec![d], 1.0))?;
            add(ParamTensor::zeros(format!("{blk}.norm.bias"), vec![d]))?;
            add(ParamTensor::gaussian(format!("{blk}.fc1.weight"), vec![h, width], inv(width), &mut rng))?;
            add(ParamTensor::zeros(format!("{blk}.fc1.bias"), vec![h]))?;
            add(ParamTensor::gaussian(format!("{blk}.fc2.weight"), vec![width, h], 0.5 * inv(h), &mut rng))?;
            // a per-token constant from the token-mixing output would be
            // removed by the next norm, so that layer has no bias
            if i != TOKEN_MIX_BLOCK {
                add(ParamTensor::zeros(format!("{blk}.fc2.bias"), vec![width]))?;
            }
        }
        add(ParamTensor::filled("out.norm.gain", vec![d], 1.0))?;
        add(ParamTensor::zeros("out.norm.bias", vec![d]))?;
        add(ParamTensor::gaussian("out.proj.weight", vec![pd, d], 0.5 * inv(d), &mut rng))?;
        add(ParamTensor::zeros("out.proj.bias", vec![pd]))?;
        Ok(Self { cfg, params: ps, tape: None })
    }

    /// Rebuilds a network from a parameter store, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(cfg: NetConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(cfg, 0)?;
        if reference.params.len() != params.len() {
            return input_err(format!("expected {} parameter tensors, found {}", reference.params.len(), params.len()));
        }
        for p in reference.params.iter() {
            let q = params.require(&p.layer_id)?;
            if q.shape != p.shape {
                return input_err(format!("layer {}: expected shape {:?}, found {:?}", p.layer_id, p.shape, q.shape));
            }
        }
        Ok(Self { cfg, params, tape: None })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        self.tape = None;
        &mut self.params
    }

    pub fn param(&self, id: &str) -> Result<&ParamTensor> {
        self.params.require(id)
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in self.params.iter_mut() {
            p.requires_grad = flag;
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.num_values()
    }

    /// Shape `(out, in)` of a dense weight.
    pub fn weight_dims(&self, id: &str) -> Result<(usize, usize)> {
        let p = self.params.require(id)?;
        match p.shape.as_slice() {
            [o, i] => Ok((*o, *i)),
            _ => input_err(format!("layer {id} is not a matrix")),
        }
    }

    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub(crate) fn validate_sample(&self, s: &Sample) -> Result<()> {
        if s.x.len() != self.cfg.pixels() {
            return input_err(format!("image has {} values, expected {}", s.x.len(), self.cfg.pixels()));
        }
        if s.t >= self.cfg.timesteps {
            return input_err(format!("timestep {} out of range [0, {})", s.t, self.cfg.timesteps));
        }
        if s.cond.len() != self.cfg.cond_len {
            return input_err(format!("condition has {} tokens, expected {}", s.cond.len(), self.cfg.cond_len));
        }
        if let Some(&bad) = s.cond.iter().find(|&&id| id >= self.cfg.vocab) {
            return Err(FadeError::Vocabulary { id: bad, vocab: self.cfg.vocab });
        }
        Ok(())
    }

    /// Widens the weights for a forward pass. An enabled, unmerged adapter is
    /// folded into the dense weights unless `dropout` asks for the separate
    /// train-time path.
    pub fn resolve(&self, adapter: Option<&SparseAdapter>, dropout: bool) -> Result<ResolvedNet> {
        let f = |id: &str| -> Result<Vec<f64>> { Ok(self.params.require(id)?.to_f64()) };
        let dense = |name: &'static str, bias: bool| -> Result<DenseRt> {
            let wid = format!("{name}.weight");
            let (out, inp) = self.weight_dims(&wid)?;
            let mut w = f(&wid)?;
            let b = if bias { Some(f(&format!("{name}.bias"))?) } else { None };
            let lora = match adapter {
                Some(ad) => ad.runtime(&wid, out, inp)?,
                None => None,
            };
            let lora = match lora {
                Some(rt) if !(dropout && rt.dropout > 0.0) => {
                    for (wi, di) in w.iter_mut().zip(&rt.delta) {
                        *wi += *di;
                    }
                    Some(LoraRuntime { folded: true, ..rt })
                }
                other => other,
            };
            Ok(DenseRt { name, out, inp, w, b, lora })
        };
        let norm = |name: &'static str| -> Result<NormRt> {
            Ok(NormRt { name, gain: f(&format!("{name}.gain"))?, bias: f(&format!("{name}.bias"))? })
        };
        let sched = self.cfg.schedule()?;
        let skip = sched.alpha_bar.iter().map(|ab| (ab.sqrt(), (1.0 - ab).sqrt())).collect();
        Ok(ResolvedNet {
            cfg: self.cfg,
            patch_embed: dense("patch_embed", true)?,
            pos_embed: f("pos_embed")?,
            time_proj: dense("time_proj", true)?,
            token_embed: f("token_embed")?,
            attn_norm: norm("attn.norm")?,
            q: dense("attn.q", false)?,
            k: dense("attn.k", false)?,
            v: dense("attn.v", false)?,
            o: dense("attn.o", true)?,
            mlp: [
                (norm("mlp1.norm")?, dense("mlp1.fc1", true)?, dense("mlp1.fc2", false)?),
                (norm("mlp2.norm")?, dense("mlp2.fc1", true)?, dense("mlp2.fc2", true)?),
            ],
            out_norm: norm("out.norm")?,
            out_proj: dense("out.proj", true)?,
            skip,
            dropout,
        })
    }

    /// Single-sample forward that retains activations for [`Self::backward`].
    pub fn forward(
        &mut self,
        x_t: &[f64],
        t: usize,
        cond: &[usize],
        adapter: Option<&SparseAdapter>,
        capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let s = Sample { x: x_t, t, cond };
        let (mut outs, recs) = self.forward_batch::<ChaCha8Rng>(&[s], adapter, None, capture)?;
        Ok((outs.pop().unwrap_or_default(), recs))
    }

    /// Batched forward that retains activations. When `dropout_rng` is given,
    /// adapter dropout is sampled from it.
    pub fn forward_batch<R: Rng>(
        &mut self,
        batch: &[Sample],
        adapter: Option<&SparseAdapter>,
        mut dropout_rng: Option<&mut R>,
        capture: bool,
    ) -> Result<(Vec<Vec<f64>>, Vec<AttentionRecord>)> {
        for s in batch {
            self.validate_sample(s)?;
        }
        let resolved = self.resolve(adapter, dropout_rng.is_some())?;
        let mut outs = Vec::with_capacity(batch.len());
        let mut tapes = Vec::with_capacity(batch.len());
        let mut records = Vec::new();
        for s in batch {
            let (y, tape, recs) = resolved.run(s, dropout_rng.as_deref_mut(), capture);
            outs.push(y);
            tapes.push(tape);
            records.extend(recs);
        }
        self.tape = Some(Tape { resolved, samples: tapes });
        Ok((outs, records))
    }

    /// Gradients of `L` w.r.t. every trainable parameter, where `upstream`
    /// is `∂L/∂eps_hat` for the last single-sample forward.
    pub fn backward(&mut self, upstream: &[f64]) -> Result<Gradients> {
        self.backward_batch(&[upstream.to_vec()])
    }

    pub fn backward_batch(&mut self, upstreams: &[Vec<f64>]) -> Result<Gradients> {
        let tape = self.tape.as_ref().ok_or_else(|| FadeError::State("backward called before forward".into()))?;
        if upstreams.len() != tape.samples.len() {
            return input_err(format!("{} upstream gradients for a batch of {}", upstreams.len(), tape.samples.len()));
        }
        let mut grads = Gradients::new();
        for (st, up) in tape.samples.iter().zip(upstreams) {
            if up.len() != self.cfg.pixels() {
                return input_err("upstream gradient shape does not match the image");
            }
            tape.resolved.backprop(st, up, &self.params, &mut grads);
        }
        // factorize accumulated adapter deltas into A and B gradients
        let r = &tape.resolved;
        for d in r.dense_layers() {
            if let Some(rt) = &d.lora {
                let key = format!("{}.weight.delta", d.name);
                if let Some(gd) = grads.get(&key).map(|g| g.to_vec()) {
                    let (ga, gb) = rt.factor_grads(&gd, d.out, d.inp);
                    grads.insert(format!("{}.weight.lora_a", d.name), ga);
                    grads.insert(format!("{}.weight.lora_b", d.name), gb);
                }
                grads.retain(|k| k != key);
            }
        }
        Ok(grads)
    }

    /// Read-only forward without retained activations.
    pub fn infer(
        &self,
        x_t: &[f64],
        t: usize,
        cond: &[usize],
        adapter: Option<&SparseAdapter>,
        capture: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        self.validate_sample(&Sample { x: x_t, t, cond })?;
        let r = self.resolve(adapter, false)?;
        Ok(r.infer(x_t, t, cond, capture))
    }
}

fn time_features(t: usize, d: usize) -> Vec<f64> {
    let half = d / 2;
    let mut f = vec![0.0; d];
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        let a = t as f64 * freq;
        f[k] = a.sin();
        f[half + k] = a.cos();
    }
    f
}

fn dropout<R: Rng>(x: &Mat, p: f64, rng: &mut R) -> (Mat, Vec<f64>) {
    let keep = 1.0 / (1.0 - p);
    let scale: Vec<f64> = (0..x.data.len()).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
    let data = x.data.iter().zip(&scale).map(|(v, s)| v * s).collect();
    (Mat::from_vec(x.rows, x.cols, data), scale)
}

impl DenseRt {
    fn forward<R: Rng>(&self, x: &Mat, rng: Option<&mut R>) -> (Mat, DenseTape) {
        let mut y = layers::linear(x, &self.w, self.b.as_deref(), self.out);
        let mut x_drop = None;
        if let Some(rt) = &self.lora {
            if !rt.folded {
                let (xd, scale) = match rng {
                    Some(rng) if rt.dropout > 0.0 => dropout(x, rt.dropout, rng),
                    _ => (x.clone(), vec![1.0; x.data.len()]),
                };
                y.add_assign(&layers::linear(&xd, &rt.delta, None, self.out));
                x_drop = Some((xd, scale));
            }
        }
        (y, DenseTape { x: x.clone(), x_drop })
    }

    fn backward(&self, tape: &DenseTape, dy: &Mat, params: &ParamStore, grads: &mut Gradients) -> Mat {
        let wid = format!("{}.weight", self.name);
        let base_trainable = params.get(&wid).map(|p| p.requires_grad).unwrap_or(false);
        if base_trainable {
            layers::accumulate_outer(&tape.x, dy, grads.entry(&wid, self.out * self.inp));
        }
        if let Some(bias) = &self.b {
            let bid = format!("{}.bias", self.name);
            if params.get(&bid).map(|p| p.requires_grad).unwrap_or(false) {
                let db = grads.entry(&bid, bias.len());
                for r in 0..dy.rows {
                    for (g, v) in db.iter_mut().zip(dy.row(r)) {
                        *g += *v;
                    }
                }
            }
        }
        let mut dx = layers::linear_backward(&tape.x, &self.w, dy, None, None);
        if let Some(rt) = &self.lora {
            let key = format!("{wid}.delta");
            let acc = grads.entry(&key, self.out * self.inp);
            match &tape.x_drop {
                Some((xd, scale)) => {
                    layers::accumulate_outer(xd, dy, acc);
                    let mut dxd = layers::linear_backward(xd, &rt.delta, dy, None, None);
                    for (g, s) in dxd.data.iter_mut().zip(scale) {
                        *g *= s;
                    }
                    dx.add_assign(&dxd);
                }
                None => layers::accumulate_outer(&tape.x, dy, acc),
            }
        }
        dx
    }
}

impl NormRt {
    fn backward(&self, cache: &LayerNormCache, dy: &Mat, params: &ParamStore, grads: &mut Gradients) -> Mat {
        let gid = format!("{}.gain", self.name);
        let bid = format!("{}.bias", self.name);
        let d = self.gain.len();
        let g_train = params.get(&gid).map(|p| p.requires_grad).unwrap_or(false);
        let b_train = params.get(&bid).map(|p| p.requires_grad).unwrap_or(false);
        let mut dg = if g_train { Some(vec![0.0; d]) } else { None };
        let mut db = if b_train { Some(vec![0.0; d]) } else { None };
        let dx = layers::layer_norm_backward(cache, &self.gain, dy, dg.as_deref_mut(), db.as_deref_mut());
        if let Some(dg) = dg {
            add_into(grads.entry(&gid, d), &dg);
        }
        if let Some(db) = db {
            add_into(grads.entry(&bid, d), &db);
        }
        dx
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += *b;
    }
}

impl ResolvedNet {
    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    fn dense_layers(&self) -> Vec<&DenseRt> {
        vec![
            &self.patch_embed,
            &self.time_proj,
            &self.q,
            &self.k,
            &self.v,
            &self.o,
            &self.mlp[0].1,
            &self.mlp[0].2,
            &self.mlp[1].1,
            &self.mlp[1].2,
            &self.out_proj,
        ]
    }

    /// Forward without a tape. Inputs must already be validated.
    pub fn infer(&self, x_t: &[f64], t: usize, cond: &[usize], capture: bool) -> (Vec<f64>, Vec<AttentionRecord>) {
        let (y, _, recs) = self.run::<ChaCha8Rng>(&Sample { x: x_t, t, cond }, None, capture);
        (y, recs)
    }

    fn patchify(&self, x: &[f64]) -> Mat {
        let c = &self.cfg;
        let g = c.grid();
        let p = c.patch;
        let mut m = Mat::zeros(c.tokens(), c.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                let row = m.row_mut(gy * g + gx);
                for dy in 0..p {
                    for dx in 0..p {
                        row[dy * p + dx] = x[(gy * p + dy) * c.image_size + gx * p + dx];
                    }
                }
            }
        }
        m
    }

    fn unpatchify(&self, m: &Mat) -> Vec<f64> {
        let c = &self.cfg;
        let g = c.grid();
        let p = c.patch;
        let mut x = vec![0.0; c.pixels()];
        for gy in 0..g {
            for gx in 0..g {
                let row = m.row(gy * g + gx);
                for dy in 0..p {
                    for dx in 0..p {
                        x[(gy * p + dy) * c.image_size + gx * p + dx] = row[dy * p + dx];
                    }
                }
            }
        }
        x
    }

    fn run<R: Rng>(&self, s: &Sample, mut rng: Option<&mut R>, capture: bool) -> (Vec<f64>, SampleTape, Vec<AttentionRecord>) {
        let c = &self.cfg;
        let d = c.dim;
        let n = c.tokens();
        let rng_on = self.dropout;

        let patches = self.patchify(s.x);
        let (mut h, patch_tape) = self.patch_embed.forward(&patches, if rng_on { rng.as_deref_mut() } else { None });
        let tf = Mat::from_vec(1, d, time_features(s.t, d));
        let (temb, time_tape) = self.time_proj.forward(&tf, if rng_on { rng.as_deref_mut() } else { None });
        for i in 0..n {
            let hr = h.row_mut(i);
            let pr = &self.pos_embed[i * d..(i + 1) * d];
            for j in 0..d {
                hr[j] += pr[j] + temb.data[j];
            }
        }

        let mut cond_emb = Mat::zeros(s.cond.len(), d);
        for (r, &id) in s.cond.iter().enumerate() {
            cond_emb.row_mut(r).copy_from_slice(&self.token_embed[id * d..(id + 1) * d]);
        }

        let (u, attn_ln) = layers::layer_norm(&h, &self.attn_norm.gain, &self.attn_norm.bias);
        let (q, q_tape) = self.q.forward(&u, if rng_on { rng.as_deref_mut() } else { None });
        let (k, k_tape) = self.k.forward(&cond_emb, if rng_on { rng.as_deref_mut() } else { None });
        let (v, v_tape) = self.v.forward(&cond_emb, if rng_on { rng.as_deref_mut() } else { None });
        let (att, probs) = layers::cross_attention(&q, &k, &v, c.heads);
        let (ao, o_tape) = self.o.forward(&att, if rng_on { rng.as_deref_mut() } else { None });
        h.add_assign(&ao);

        let mut mlp_tapes = Vec::with_capacity(2);
        for (i, (norm, fc1, fc2)) in self.mlp.iter().enumerate() {
            let (u, ln) = layers::layer_norm(&h, &norm.gain, &norm.bias);
            let u = if i == TOKEN_MIX_BLOCK { u.transpose() } else { u };
            let (z, fc1_tape) = fc1.forward(&u, if rng_on { rng.as_deref_mut() } else { None });
            let a = layers::silu(&z);
            let (y, fc2_tape) = fc2.forward(&a, if rng_on { rng.as_deref_mut() } else { None });
            let y = if i == TOKEN_MIX_BLOCK { y.transpose() } else { y };
            h.add_assign(&y);
            mlp_tapes.push(MlpTape { ln, fc1: fc1_tape, z, fc2: fc2_tape });
        }

        let (u, out_ln) = layers::layer_norm(&h, &self.out_norm.gain, &self.out_norm.bias);
        let (y, out_tape) = self.out_proj.forward(&u, if rng_on { rng } else { None });
        let (sa, sn) = self.skip[s.t];
        let out: Vec<f64> = self.unpatchify(&y).iter().zip(s.x).map(|(f, x)| sn * x + sa * f).collect();

        let records = if capture {
            probs
                .iter()
                .enumerate()
                .map(|(head, p)| AttentionRecord { layer_id: CROSS_ATTN_LAYER.to_string(), head, t: s.t, weights: p.clone() })
                .collect()
        } else {
            Vec::new()
        };

        let tape = SampleTape {
            t: s.t,
            cond: s.cond.to_vec(),
            patch: patch_tape,
            time: time_tape,
            attn_ln,
            q_in: q_tape,
            k_in: k_tape,
            v_in: v_tape,
            q,
            k,
            v,
            probs,
            o_in: o_tape,
            mlp: mlp_tapes,
            out_ln,
            out_in: out_tape,
        };
        (out, tape, records)
    }

    fn backprop(&self, st: &SampleTape, upstream: &[f64], params: &ParamStore, grads: &mut Gradients) {
        let c = &self.cfg;
        let d = c.dim;
        let n = c.tokens();
        let trainable = |id: &str| params.get(id).map(|p| p.requires_grad).unwrap_or(false);

        let sa = self.skip[st.t].0;
        let scaled: Vec<f64> = upstream.iter().map(|g| g * sa).collect();
        let dy = self.patchify(&scaled);
        let du = self.out_proj.backward(&st.out_in, &dy, params, grads);
        let mut dh = self.out_norm.backward(&st.out_ln, &du, params, grads);

        for (i, (norm, fc1, fc2)) in self.mlp.iter().enumerate().rev() {
            let mt = &st.mlp[i];
            let dy = if i == TOKEN_MIX_BLOCK { dh.transpose() } else { dh.clone() };
            let da = fc2.backward(&mt.fc2, &dy, params, grads);
            let dz = layers::silu_backward(&mt.z, &da);
            let du = fc1.backward(&mt.fc1, &dz, params, grads);
            let du = if i == TOKEN_MIX_BLOCK { du.transpose() } else { du };
            let dx = norm.backward(&mt.ln, &du, params, grads);
            dh.add_assign(&dx);
        }

        let datt = self.o.backward(&st.o_in, &dh, params, grads);
        let (dq, dk, dv) = layers::cross_attention_backward(&st.q, &st.k, &st.v, &st.probs, &datt);
        let du = self.q.backward(&st.q_in, &dq, params, grads);
        let mut dcond = self.k.backward(&st.k_in, &dk, params, grads);
        dcond.add_assign(&self.v.backward(&st.v_in, &dv, params, grads));
        let dx = self.attn_norm.backward(&st.attn_ln, &du, params, grads);
        dh.add_assign(&dx);

        if trainable("token_embed") {
            let g = grads.entry("token_embed", c.vocab * d);
            for (r, &id) in st.cond.iter().enumerate() {
                add_into(&mut g[id * d..(id + 1) * d], dcond.row(r));
            }
        }
        if trainable("pos_embed") {
            add_into(grads.entry("pos_embed", n * d), &dh.data);
        }
        let mut dtemb = Mat::zeros(1, d);
        for i in 0..n {
            add_into(&mut dtemb.data, dh.row(i));
        }
        self.time_proj.backward(&st.time, &dtemb, params, grads);
        self.patch_embed.backward(&st.patch, &dh, params, grads);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig { image_size: 4, patch: 2, dim: 8, heads: 2, mlp_hidden: 8, timesteps: 10, vocab: 5, cond_len: 3, ..NetConfig::default() }
    }

    fn input(cfg: &NetConfig) -> Vec<f64> {
        (0..cfg.pixels()).map(|i| ((i * 7) as f64 * 0.37).sin()).collect()
    }

    #[test]
    fn zero_output_projection_leaves_only_the_skip() {
        let cfg = tiny();
        let mut net = DenoiserNet::new(cfg, 3).unwrap();
        for id in ["out.proj.weight", "out.proj.bias"] {
            net.params_mut().get_mut(id).unwrap().values.iter_mut().for_each(|v| *v = 0.0);
        }
        let x = input(&cfg);
        let (y, _) = net.infer(&x, 4, &[0, 1, 3], None, false).unwrap();
        let mut ab = 1.0;
        for t in 0..=4 {
            ab *= 1.0 - (cfg.beta_min + (cfg.beta_max - cfg.beta_min) * t as f64 / (cfg.timesteps - 1) as f64);
        }
        for (a, b) in y.iter().zip(&x) {
            assert!((a - (1.0 - ab).sqrt() * b).abs() < 1e-12);
        }
    }

    #[test]
    fn capture_flag_controls_records() {
        let mut net = DenoiserNet::new(tiny(), 3).unwrap();
        let x = input(&tiny());
        let (_, recs) = net.forward(&x, 2, &[0, 1, 2], None, false).unwrap();
        assert!(recs.is_empty());
        let (_, recs) = net.forward(&x, 2, &[0, 1, 2], None, true).unwrap();
        assert_eq!(recs.len(), tiny().heads);
        for r in &recs {
            assert_eq!(r.weights.rows, tiny().tokens());
            assert_eq!(r.weights.cols, 3);
            for i in 0..r.weights.rows {
                let s: f64 = r.weights.row(i).iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = DenoiserNet::new(tiny(), 3).unwrap();
        let x = input(&tiny());
        assert!(matches!(net.infer(&x[..3], 0, &[0, 1, 2], None, false), Err(FadeError::Input(_))));
        assert!(matches!(net.infer(&x, 10, &[0, 1, 2], None, false), Err(FadeError::Input(_))));
        assert!(matches!(net.infer(&x, 0, &[0, 1, 9], None, false), Err(FadeError::Vocabulary { id: 9, .. })));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut net = DenoiserNet::new(tiny(), 3).unwrap();
        let up = vec![0.0; tiny().pixels()];
        assert!(matches!(net.backward(&up), Err(FadeError::State(_))));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut net = DenoiserNet::new(tiny(), 3).unwrap();
        net.forward(&input(&tiny()), 1, &[0, 1, 2], None, false).unwrap();
        let g = net.backward(&vec![0.0; tiny().pixels()]).unwrap();
        assert!(!g.is_empty());
        for (_, v) in g.iter() {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let a = DenoiserNet::new(tiny(), 11).unwrap();
        let b = DenoiserNet::new(tiny(), 11).unwrap();
        let x = input(&tiny());
        let ya = a.infer(&x, 3, &[0, 2, 4], None, false).unwrap().0;
        let yb = b.infer(&x, 3, &[0, 2, 4], None, false).unwrap().0;
        assert_eq!(ya.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), yb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn frozen_params_get_no_gradients() {
        let mut net = DenoiserNet::new(tiny(), 3).unwrap();
        net.set_requires_grad(false);
        net.forward(&input(&tiny()), 1, &[0, 1, 2], None, false).unwrap();
        let g = net.backward(&vec![1.0; tiny().pixels()]).unwrap();
        assert!(g.is_empty());
    }
}
