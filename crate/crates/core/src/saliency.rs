//! Forget-set gradient saliency and the binary masks derived from it.
//!
//! Saliency of a weight is the mean, over sampled batches of noised
//! forget-set images, of the absolute gradient of the denoising loss.
//! Masks select either every weight above a threshold `γ`, the global top
//! `Q` fraction of weights, or the top `Q` fraction of blocks ranked by
//! their mean saliency.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{pack_bits, unpack_bits, ByteReader, ByteWriter};
use crate::diffusion::data::LabeledImage;
use crate::diffusion::NoiseSchedule;
use crate::error::{input_err, FadeError, Result};
use crate::substrate::{DenoiserNet, Sample};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSaliency {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SaliencyMap {
    pub layers: BTreeMap<String, LayerSaliency>,
}

impl SaliencyMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let id = id.into();
        if shape.iter().product::<usize>() != values.len() {
            return input_err(format!("saliency for {id}: shape {shape:?} does not hold {} values", values.len()));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return input_err(format!("saliency for {id} has negative or NaN entries"));
        }
        self.layers.insert(id, LayerSaliency { shape, values });
        Ok(())
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSaliency> {
        self.layers.get(id)
    }

    pub fn total_len(&self) -> usize {
        self.layers.values().map(|l| l.values.len()).sum()
    }

    pub fn max(&self) -> f64 {
        self.layers.values().flat_map(|l| l.values.iter().copied()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|(k, l)| (k.clone(), LayerSaliency { shape: l.shape.clone(), values: l.values.iter().map(|v| v * c).collect() }))
            .collect();
        Self { layers }
    }

    /// Flattened values in layer-id order.
    pub fn flat(&self) -> Vec<f64> {
        self.layers.values().flat_map(|l| l.values.iter().copied()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"FSAL");
        w.u16(1);
        w.u32(self.layers.len() as u32);
        for (id, l) in &self.layers {
            w.str(id);
            w.u32(l.shape.len() as u32);
            for &d in &l.shape {
                w.u32(d as u32);
            }
            for &v in &l.values {
                w.f64(v);
            }
        }
        w.finish()
    }
}

/// Mean absolute gradient of the denoising loss on forget images.
///
/// Each of the `n_batches` batches draws `batch_size` images uniformly from
/// `forget`, a timestep uniform in `[0, T)` and fresh Gaussian noise per
/// item. Only the layers in `targets` are differentiated.
pub fn compute_saliency(
    net: &DenoiserNet,
    forget: &[&LabeledImage],
    sched: &NoiseSchedule,
    targets: &[&str],
    n_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<SaliencyMap> {
    if forget.is_empty() {
        return input_err("saliency needs a nonempty forget set");
    }
    if n_batches == 0 || batch_size == 0 {
        return input_err("saliency needs at least one batch of at least one item");
    }
    let mut work = net.clone();
    for p in work.params_mut().iter_mut() {
        p.requires_grad = targets.contains(&p.layer_id.as_str());
    }
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for &id in targets {
        let p = work.param(id)?;
        acc.insert(id.to_string(), vec![0.0; p.len()]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = net.config().pixels();
    for _ in 0..n_batches {
        let mut xs = Vec::with_capacity(batch_size);
        let mut eps = Vec::with_capacity(batch_size);
        let mut ts = Vec::with_capacity(batch_size);
        let mut conds = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let img = forget[rng.gen_range(0..forget.len())];
            let t = rng.gen_range(0..sched.steps());
            let e: Vec<f64> = (0..pixels).map(|_| rng.sample(StandardNormal)).collect();
            xs.push(sched.forward_diffuse(&img.model_space(), t, &e)?);
            eps.push(e);
            ts.push(t);
            conds.push(img.cond());
        }
        let batch: Vec<Sample> = (0..batch_size).map(|i| Sample { x: &xs[i], t: ts[i], cond: &conds[i] }).collect();
        let (outs, _) = work.forward_batch::<ChaCha8Rng>(&batch, None, None, false)?;
        let norm = 2.0 / (pixels * batch_size) as f64;
        let ups: Vec<Vec<f64>> = outs.iter().zip(&eps).map(|(o, e)| o.iter().zip(e).map(|(a, b)| norm * (a - b)).collect()).collect();
        let g = work.backward_batch(&ups)?;
        for (id, a) in acc.iter_mut() {
            if let Some(gv) = g.get(id) {
                for (ai, gi) in a.iter_mut().zip(gv) {
                    *ai += gi.abs();
                }
            }
        }
    }
    let mut map = SaliencyMap::new();
    for (id, mut v) in acc {
        v.iter_mut().for_each(|x| *x /= n_batches as f64);
        let shape = net.param(&id)?.shape.clone();
        map.insert(id, shape, v)?;
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerWeight,
    PerBlock,
}

/// How a mask's bits were chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Gamma(f64),
    Q(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub shape: Vec<usize>,
    pub bits: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub layers: BTreeMap<String, LayerMask>,
    pub granularity: Granularity,
    pub selector: Selector,
    /// Fingerprint of the dataset the saliency came from, if known.
    pub fingerprint: String,
}

impl BinaryMask {
    pub fn layer(&self, id: &str) -> Option<&LayerMask> {
        self.layers.get(id)
    }

    pub fn ones(&self) -> usize {
        self.layers.values().map(|l| l.bits.iter().filter(|&&b| b).count()).sum()
    }

    pub fn total(&self) -> usize {
        self.layers.values().map(|l| l.bits.len()).sum()
    }

    pub fn density(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            0.0
        } else {
            self.ones() as f64 / n as f64
        }
    }

    pub fn with_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.fingerprint = fp.into();
        self
    }

    /// Bit-wise subset test over identical layer coverage.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.layers.iter().all(|(id, l)| other.layers.get(id).is_some_and(|o| l.bits.iter().zip(&o.bits).all(|(&a, &b)| !a || b)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"FMSK");
        w.u16(MASK_VERSION);
        w.u8(match self.granularity {
            Granularity::PerWeight => 0,
            Granularity::PerBlock => 1,
        });
        match self.selector {
            Selector::Gamma(g) => {
                w.u8(0);
                w.f64(g);
            }
            Selector::Q(q) => {
                w.u8(1);
                w.f64(q);
            }
        }
        w.str(&self.fingerprint);
        w.u32(self.layers.len() as u32);
        for (id, l) in &self.layers {
            w.str(id);
            w.u32(l.shape.len() as u32);
            for &d in &l.shape {
                w.u32(d as u32);
            }
            w.bytes(&pack_bits(&l.bits));
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != b"FMSK" {
            return Err(FadeError::Format("not a mask file".into()));
        }
        let version = r.u16()?;
        if version != MASK_VERSION {
            return Err(FadeError::Format(format!("unsupported mask version {version}")));
        }
        let granularity = match r.u8()? {
            0 => Granularity::PerWeight,
            1 => Granularity::PerBlock,
            g => return Err(FadeError::Format(format!("unknown granularity tag {g}"))),
        };
        let selector = match (r.u8()?, r.f64()?) {
            (0, g) => Selector::Gamma(g),
            (1, q) => Selector::Q(q),
            (k, _) => return Err(FadeError::Format(format!("unknown selector tag {k}"))),
        };
        let fingerprint = r.str()?;
        let n = r.u32()? as usize;
        let mut layers = BTreeMap::new();
        for _ in 0..n {
            let id = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let bits = unpack_bits(r.take(len.div_ceil(8))?, len);
            layers.insert(id, LayerMask { shape, bits });
        }
        if !r.is_empty() {
            return Err(FadeError::Format("trailing bytes after mask".into()));
        }
        Ok(Self { layers, granularity, selector, fingerprint })
    }
}

const MASK_VERSION: u16 = 1;

pub fn save_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, mask.to_bytes())?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    BinaryMask::from_bytes(&std::fs::read(path)?)
}

/// Every weight whose saliency exceeds `gamma`.
pub fn threshold_mask(sal: &SaliencyMap, gamma: f64) -> Result<BinaryMask> {
    if !(gamma >= 0.0) {
        return input_err(format!("gamma must be nonnegative, got {gamma}"));
    }
    let layers = sal
        .layers
        .iter()
        .map(|(id, l)| (id.clone(), LayerMask { shape: l.shape.clone(), bits: l.values.iter().map(|&v| v > gamma).collect() }))
        .collect();
    Ok(BinaryMask { layers, granularity: Granularity::PerWeight, selector: Selector::Gamma(gamma), fingerprint: String::new() })
}

fn check_q(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return input_err(format!("Q must lie in [0, 1], got {q}"));
    }
    Ok(())
}

/// Exactly `⌊Q·N⌋` most salient weights over all layers. Ties go to the
/// lower (layer id, flat index).
pub fn topq_mask(sal: &SaliencyMap, q: f64) -> Result<BinaryMask> {
    check_q(q)?;
    let mut all: Vec<(f64, usize, usize)> = Vec::with_capacity(sal.total_len());
    let ids: Vec<&String> = sal.layers.keys().collect();
    for (li, id) in ids.iter().enumerate() {
        for (i, &v) in sal.layers[*id].values.iter().enumerate() {
            all.push((v, li, i));
        }
    }
    let k = (q * all.len() as f64).floor() as usize;
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut layers: BTreeMap<String, LayerMask> =
        sal.layers.iter().map(|(id, l)| (id.clone(), LayerMask { shape: l.shape.clone(), bits: vec![false; l.values.len()] })).collect();
    for &(_, li, i) in &all[..k] {
        layers.get_mut(ids[li].as_str()).expect("layer present").bits[i] = true;
    }
    Ok(BinaryMask { layers, granularity: Granularity::PerWeight, selector: Selector::Q(q), fingerprint: String::new() })
}

/// Partition of each targeted tensor into blocks.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum BlockSpec {
    /// Every output row of a weight matrix is a block.
    #[default]
    PerRow,
    /// Every tensor is a single block.
    PerLayer,
    /// Block index for every flat coordinate, per layer.
    Explicit(BTreeMap<String, Vec<usize>>),
}

impl BlockSpec {
    fn assign(&self, id: &str, l: &LayerSaliency) -> Result<Vec<usize>> {
        match self {
            BlockSpec::PerLayer => Ok(vec![0; l.values.len()]),
            BlockSpec::PerRow => {
                let cols = if l.shape.len() >= 2 { l.shape[1..].iter().product() } else { l.values.len() };
                Ok((0..l.values.len()).map(|i| i / cols.max(1)).collect())
            }
            BlockSpec::Explicit(m) => {
                let a = m.get(id).ok_or_else(|| FadeError::Input(format!("block spec does not cover layer {id}")))?;
                if a.len() != l.values.len() {
                    return input_err(format!("block spec for {id} assigns {} coordinates, layer has {}", a.len(), l.values.len()));
                }
                Ok(a.clone())
            }
        }
    }
}

/// Ranks blocks by mean saliency and switches on the top `⌊Q·blocks⌋`.
pub fn block_mask(sal: &SaliencyMap, q: f64, spec: &BlockSpec) -> Result<BinaryMask> {
    check_q(q)?;
    // (mean, layer index, block id)
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    let mut assignments = Vec::new();
    for (li, (id, l)) in sal.layers.iter().enumerate() {
        let a = spec.assign(id, l)?;
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for (&b, &v) in a.iter().zip(&l.values) {
            let e = sums.entry(b).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
        blocks.extend(sums.into_iter().map(|(b, (s, n))| (s / n as f64, li, b)));
        assignments.push(a);
    }
    let k = (q * blocks.len() as f64).floor() as usize;
    blocks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let chosen: std::collections::BTreeSet<(usize, usize)> = blocks[..k].iter().map(|&(_, li, b)| (li, b)).collect();
    let layers = sal
        .layers
        .iter()
        .enumerate()
        .map(|(li, (id, l))| {
            let bits = assignments[li].iter().map(|&b| chosen.contains(&(li, b))).collect();
            (id.clone(), LayerMask { shape: l.shape.clone(), bits })
        })
        .collect();
    Ok(BinaryMask { layers, granularity: Granularity::PerBlock, selector: Selector::Q(q), fingerprint: String::new() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub jaccard: f64,
    pub frac_f_in_o: f64,
    pub intersection: usize,
    pub union: usize,
    pub count_f: usize,
    pub count_o: usize,
}

pub fn mask_overlap(mf: &BinaryMask, mo: &BinaryMask) -> Result<OverlapStats> {
    if mf.layers.len() != mo.layers.len() {
        return input_err("masks cover different layers");
    }
    let (mut inter, mut uni, mut cf, mut co) = (0, 0, 0, 0);
    for (id, lf) in &mf.layers {
        let lo = mo.layers.get(id).ok_or_else(|| FadeError::Input(format!("second mask lacks layer {id}")))?;
        if lf.shape != lo.shape {
            return Err(FadeError::ShapeMismatch { layer: id.clone(), expected: lf.shape.clone(), found: lo.shape.clone() });
        }
        for (&a, &b) in lf.bits.iter().zip(&lo.bits) {
            inter += (a && b) as usize;
            uni += (a || b) as usize;
            cf += a as usize;
            co += b as usize;
        }
    }
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(OverlapStats {
        jaccard: ratio(inter, uni),
        frac_f_in_o: ratio(inter, cf),
        intersection: inter,
        union: uni,
        count_f: cf,
        count_o: co,
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - ma) * (y - mb);
        da += (x - ma) * (x - ma);
        db += (y - mb) * (y - mb);
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}
