//! Sparse low-rank adapters.
//!
//! Each targeted weight `W` (out × in) carries factors `A` (r × in) and
//! `B` (out × r). The update seen by every forward pass is
//! `ΔW = (α/r) · (B·A) ⊙ M`, where `M` is an optional binary mask. Masking
//! the product rather than the factors means a masked-out coordinate can
//! never move, whatever the optimizer does to `A` and `B`.
//!
//! The adapter lives outside the network. A forward pass with the adapter
//! disabled runs exactly the base computation, which is what lets the
//! unlearning trainer use the same weights as both teacher and student.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{input_err, FadeError, Result};
use crate::saliency::BinaryMask;
use crate::substrate::{DenoiserNet, Gradients, Mat};

const MAGIC: &[u8; 4] = b"FADE";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub layer_id: String,
    pub out: usize,
    pub inp: usize,
    pub rank: usize,
    pub alpha: f32,
    pub dropout: f32,
    /// `rank × in`, row-major.
    pub a: Vec<f32>,
    /// `out × rank`, row-major.
    pub b: Vec<f32>,
    /// `out × in`; `None` behaves as all ones.
    pub mask: Option<Vec<bool>>,
}

impl AdapterLayer {
    pub fn scale(&self) -> f64 {
        self.alpha as f64 / self.rank as f64
    }

    /// `(α/r)·(B·A) ⊙ M` in 64-bit.
    pub fn delta(&self) -> Vec<f64> {
        let (out, inp, r) = (self.out, self.inp, self.rank);
        let s = self.scale();
        let mut d = vec![0.0; out * inp];
        for o in 0..out {
            for k in 0..r {
                let bok = self.b[o * r + k] as f64;
                if bok == 0.0 {
                    continue;
                }
                let arow = &self.a[k * inp..(k + 1) * inp];
                let drow = &mut d[o * inp..(o + 1) * inp];
                for (dv, &av) in drow.iter_mut().zip(arow) {
                    *dv += bok * av as f64;
                }
            }
        }
        for (i, v) in d.iter_mut().enumerate() {
            let keep = self.mask.as_ref().is_none_or(|m| m[i]);
            *v = if keep { *v * s } else { 0.0 };
        }
        d
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// What a forward pass needs from one adapted layer.
#[derive(Debug, Clone)]
pub struct LoraRuntime {
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub mask: Option<Vec<bool>>,
    pub scale: f64,
    pub rank: usize,
    pub dropout: f64,
    /// The delta was added into the dense weight for this pass.
    pub folded: bool,
}

impl LoraRuntime {
    /// Maps `∂L/∂ΔW` onto `(∂L/∂A, ∂L/∂B)` through the masked product.
    pub fn factor_grads(&self, d_delta: &[f64], out: usize, inp: usize) -> (Vec<f64>, Vec<f64>) {
        let r = self.rank;
        let g: Vec<f64> =
            d_delta.iter().enumerate().map(|(i, &v)| if self.mask.as_ref().is_none_or(|m| m[i]) { v * self.scale } else { 0.0 }).collect();
        let mut da = vec![0.0; r * inp];
        let mut db = vec![0.0; out * r];
        for o in 0..out {
            let grow = &g[o * inp..(o + 1) * inp];
            for k in 0..r {
                let arow = &self.a[k * inp..(k + 1) * inp];
                db[o * r + k] = grow.iter().zip(arow).map(|(x, y)| x * y).sum();
                let bok = self.b[o * r + k];
                if bok != 0.0 {
                    for (dv, gv) in da[k * inp..(k + 1) * inp].iter_mut().zip(grow) {
                        *dv += bok * gv;
                    }
                }
            }
        }
        (da, db)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdapter {
    layers: BTreeMap<String, AdapterLayer>,
    enabled: bool,
    merged: bool,
}

pub fn lora_a_key(layer_id: &str) -> String {
    format!("{layer_id}.lora_a")
}

pub fn lora_b_key(layer_id: &str) -> String {
    format!("{layer_id}.lora_b")
}

/// Attaches a fresh adapter: `A ~ N(0, (1/r)²)`, `B = 0`, enabled.
pub fn attach(
    net: &DenoiserNet,
    targets: &[&str],
    rank: usize,
    alpha: f32,
    dropout: f32,
    init_seed: u64,
    mask: Option<&BinaryMask>,
) -> Result<SparseAdapter> {
    if rank == 0 {
        return input_err("adapter rank must be at least 1");
    }
    if !(alpha > 0.0) {
        return input_err("adapter alpha must be positive");
    }
    if !(0.0..1.0).contains(&dropout) {
        return input_err("adapter dropout must lie in [0, 1)");
    }
    if targets.is_empty() {
        return input_err("no adapter targets given");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let normal = Normal::new(0.0, 1.0 / rank as f64).expect("valid std");
    let mut layers = BTreeMap::new();
    for &id in targets {
        let (out, inp) = net.weight_dims(id)?;
        if rank > out.min(inp) {
            return input_err(format!("rank {rank} exceeds the smaller dimension of {id} ({out}×{inp})"));
        }
        let layer_mask = match mask {
            Some(m) => {
                let lm = m.layer(id).ok_or_else(|| FadeError::Input(format!("mask does not cover layer {id}")))?;
                if lm.shape != [out, inp] {
                    return Err(FadeError::ShapeMismatch { layer: id.to_string(), expected: vec![out, inp], found: lm.shape.clone() });
                }
                Some(lm.bits.clone())
            }
            None => None,
        };
        let a = (0..rank * inp).map(|_| normal.sample(&mut rng) as f32).collect();
        layers.insert(
            id.to_string(),
            AdapterLayer { layer_id: id.to_string(), out, inp, rank, alpha, dropout, a, b: vec![0.0; out * rank], mask: layer_mask },
        );
    }
    Ok(SparseAdapter { layers, enabled: true, merged: false })
}

impl SparseAdapter {
    pub fn layers(&self) -> impl Iterator<Item = &AdapterLayer> {
        self.layers.values()
    }

    pub fn layer(&self, id: &str) -> Option<&AdapterLayer> {
        self.layers.get(id)
    }

    pub(crate) fn layer_mut(&mut self, id: &str) -> Option<&mut AdapterLayer> {
        self.layers.get_mut(id)
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.keys().cloned().collect()
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    /// Toggles the adapter path. No weights are copied.
    pub fn set_enabled(&mut self, flag: bool) {
        self.enabled = flag;
    }

    pub fn param_count(&self) -> usize {
        self.layers.values().map(|l| l.param_count()).sum()
    }

    pub fn effective_delta(&self, layer_id: &str) -> Result<Mat> {
        let l = self.layers.get(layer_id).ok_or_else(|| FadeError::Input(format!("layer {layer_id} carries no adapter")))?;
        Ok(Mat::from_vec(l.out, l.inp, l.delta()))
    }

    /// The same adapter with `B` negated, so its delta is `-ΔW`.
    pub fn negated(&self) -> Self {
        let mut n = self.clone();
        for l in n.layers.values_mut() {
            l.b.iter_mut().for_each(|v| *v = -*v);
        }
        n
    }

    pub(crate) fn runtime(&self, layer_id: &str, out: usize, inp: usize) -> Result<Option<LoraRuntime>> {
        if !self.enabled || self.merged {
            return Ok(None);
        }
        let Some(l) = self.layers.get(layer_id) else {
            return Ok(None);
        };
        if (l.out, l.inp) != (out, inp) {
            return Err(FadeError::ShapeMismatch { layer: layer_id.to_string(), expected: vec![out, inp], found: vec![l.out, l.inp] });
        }
        Ok(Some(LoraRuntime {
            delta: l.delta(),
            a: l.a.iter().map(|&v| v as f64).collect(),
            b: l.b.iter().map(|&v| v as f64).collect(),
            mask: l.mask.clone(),
            scale: l.scale(),
            rank: l.rank,
            dropout: l.dropout as f64,
            folded: false,
        }))
    }

    /// Checks every adapted layer exists in `net` with matching shape.
    pub fn check_against(&self, net: &DenoiserNet) -> Result<()> {
        for l in self.layers.values() {
            let p = net.param(&l.layer_id)?;
            if p.shape != [l.out, l.inp] {
                return Err(FadeError::ShapeMismatch { layer: l.layer_id.clone(), expected: p.shape.clone(), found: vec![l.out, l.inp] });
            }
        }
        Ok(())
    }

    /// Parameter values in a stable order, keyed like the gradients.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut v = Vec::new();
        for l in self.layers.values_mut() {
            v.push((lora_a_key(&l.layer_id), &mut l.a));
            v.push((lora_b_key(&l.layer_id), &mut l.b));
        }
        v
    }

    pub fn zero_grads(&self) -> Gradients {
        let mut g = Gradients::new();
        for l in self.layers.values() {
            g.insert(lora_a_key(&l.layer_id), vec![0.0; l.a.len()]);
            g.insert(lora_b_key(&l.layer_id), vec![0.0; l.b.len()]);
        }
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u8(self.enabled as u8 | (self.merged as u8) << 1);
        w.u32(self.layers.len() as u32);
        for l in self.layers.values() {
            w.str(&l.layer_id);
            w.u32(l.out as u32);
            w.u32(l.inp as u32);
            w.u32(l.rank as u32);
            w.f32(l.alpha);
            w.f32(l.dropout);
            w.f32s(&l.a);
            w.f32s(&l.b);
            match &l.mask {
                Some(m) => {
                    w.u8(1);
                    w.bits(m);
                }
                None => w.u8(0),
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(FadeError::Format("not an adapter file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(FadeError::Format(format!("unsupported adapter version {version}")));
        }
        let flags = r.u8()?;
        if flags > 3 {
            return Err(FadeError::Format(format!("corrupt adapter header flags {flags:#x}")));
        }
        let count = r.u32()? as usize;
        let mut layers = BTreeMap::new();
        for _ in 0..count {
            let layer_id = r.str()?;
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            let rank = r.u32()? as usize;
            let alpha = r.f32()?;
            let dropout = r.f32()?;
            if rank == 0 || rank > out.min(inp) {
                return Err(FadeError::Format(format!("layer {layer_id}: invalid rank {rank}")));
            }
            let a = r.f32s(rank * inp)?;
            let b = r.f32s(out * rank)?;
            let mask = match r.u8()? {
                0 => None,
                1 => Some(r.bits(out * inp)?),
                f => return Err(FadeError::Format(format!("layer {layer_id}: bad mask flag {f}"))),
            };
            layers.insert(layer_id.clone(), AdapterLayer { layer_id, out, inp, rank, alpha, dropout, a, b, mask });
        }
        if !r.is_empty() {
            return Err(FadeError::Format("trailing bytes after adapter layers".into()));
        }
        Ok(Self { layers, enabled: flags & 1 == 1, merged: flags & 2 == 2 })
    }
}

pub fn save_adapter(ad: &SparseAdapter, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ad.to_bytes())?;
    Ok(())
}

pub fn load_adapter(path: impl AsRef<Path>) -> Result<SparseAdapter> {
    SparseAdapter::from_bytes(&std::fs::read(path)?)
}

fn apply_delta(net: &mut DenoiserNet, ad: &SparseAdapter, sign: f64) -> Result<()> {
    ad.check_against(net)?;
    for l in ad.layers.values() {
        let delta = l.delta();
        let p = net.params_mut().get_mut(&l.layer_id).ok_or_else(|| FadeError::Input(format!("unknown layer id {}", l.layer_id)))?;
        for (w, d) in p.values.iter_mut().zip(&delta) {
            *w = (*w as f64 + sign * d) as f32;
        }
    }
    Ok(())
}

/// Folds `ΔW` into the base weights; the adapter then passes through.
pub fn merge(net: &mut DenoiserNet, ad: &mut SparseAdapter) -> Result<()> {
    if ad.merged {
        return Err(FadeError::State("adapter is already merged".into()));
    }
    apply_delta(net, ad, 1.0)?;
    ad.merged = true;
    Ok(())
}

/// Subtracts the same `ΔW` that [`merge`] added.
pub fn unmerge(net: &mut DenoiserNet, ad: &mut SparseAdapter) -> Result<()> {
    if !ad.merged {
        return Err(FadeError::State("adapter is not merged".into()));
    }
    apply_delta(net, ad, -1.0)?;
    ad.merged = false;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::NetConfig;

    fn net() -> DenoiserNet {
        DenoiserNet::new(
            NetConfig {
                image_size: 4,
                patch: 2,
                dim: 8,
                heads: 2,
                mlp_hidden: 8,
                timesteps: 10,
                vocab: 5,
                cond_len: 3,
                ..NetConfig::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_delta() {
        let l = AdapterLayer {
            layer_id: "w".into(),
            out: 2,
            inp: 2,
            rank: 1,
            alpha: 1.0,
            dropout: 0.0,
            a: vec![1.0, 2.0],
            b: vec![3.0, 4.0],
            mask: None,
        };
        assert_eq!(l.delta(), vec![3.0, 6.0, 4.0, 8.0]);
        let masked = AdapterLayer { mask: Some(vec![false; 4]), ..l };
        assert!(masked.delta().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fresh_adapter_has_zero_delta() {
        let ad = attach(&net(), &["attn.q.weight"], 2, 2.0, 0.0, 4, None).unwrap();
        let d = ad.effective_delta("attn.q.weight").unwrap();
        assert!(d.data.iter().all(|&v| v == 0.0));
        assert!(ad.is_enabled());
    }

    #[test]
    fn attach_validates_arguments() {
        let n = net();
        assert!(attach(&n, &["nope.weight"], 2, 1.0, 0.0, 0, None).is_err());
        assert!(attach(&n, &["attn.q.weight"], 9, 1.0, 0.0, 0, None).is_err());
        assert!(attach(&n, &["attn.q.weight"], 0, 1.0, 0.0, 0, None).is_err());
        assert!(attach(&n, &["attn.q.weight"], 2, 1.0, 1.0, 0, None).is_err());
        let ad = attach(&n, &["attn.q.weight"], 2, 1.0, 0.0, 0, None).unwrap();
        assert!(ad.effective_delta("attn.k.weight").is_err());
    }

    #[test]
    fn double_merge_is_a_state_error() {
        let mut n = net();
        let mut ad = attach(&n, &["attn.q.weight"], 2, 1.0, 0.0, 0, None).unwrap();
        assert!(matches!(unmerge(&mut n, &mut ad), Err(FadeError::State(_))));
        merge(&mut n, &mut ad).unwrap();
        assert!(matches!(merge(&mut n, &mut ad), Err(FadeError::State(_))));
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let ad = attach(&net(), &["attn.q.weight"], 2, 1.0, 0.2, 0, None).unwrap();
        let mut bytes = ad.to_bytes();
        bytes[4] = 9;
        assert!(matches!(SparseAdapter::from_bytes(&bytes), Err(FadeError::Format(_))));
        let mut bytes = ad.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(SparseAdapter::from_bytes(&bytes), Err(FadeError::Format(_))));
        let bytes = ad.to_bytes();
        assert!(SparseAdapter::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    // Full-size models put the adapter well under 1% of the checkpoint. At
    // 20k parameters the rank-4 factors are a much larger share, measured
    // here at about 14% for the default net and adapter.
    #[test]
    fn default_adapter_size_relative_to_checkpoint() {
        let net = DenoiserNet::new(NetConfig::default(), 0).unwrap();
        let ad = crate::unlearn::AdapterConfig::default().attach(&net, None).unwrap();
        let ratio = ad.to_bytes().len() as f64 / crate::substrate::checkpoint::checkpoint_bytes(&net).len() as f64;
        assert!(ratio > 0.01 && ratio < 0.15, "{ratio}");
    }
}
