//! A small two-headed image classifier used as the measuring instrument for
//! every downstream metric.
//!
//! A shared two-layer extractor maps a 16×16 image to a feature vector; one
//! linear head predicts the shape and another the palette. Training uses
//! pixel noise and one-pixel shifts as augmentation so that the probe stays
//! reliable on slightly imperfect generated images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::diffusion::data::{Attribute, ConceptDataset, DatasetSpec, LabeledImage, IMAGE_SIZE, PALETTES, SHAPES};
use crate::error::{input_err, FadeError, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::substrate::layers::{linear, linear_backward, silu, silu_backward, softmax_cross_entropy};
use crate::substrate::{Gradients, Mat, ParamStore, ParamTensor};

pub const GATE_ACCURACY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Standard deviation of additive pixel noise, in `[0, 1]` units.
    pub noise_std: f64,
    /// Maximum random shift in pixels along each axis.
    pub max_shift: usize,
    pub seed: u64,
    /// Images per cell in the held-out validation set.
    pub holdout_per_cell: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            feature_dim: 32,
            steps: 2500,
            batch_size: 64,
            learning_rate: 3e-3,
            noise_std: 0.08,
            max_shift: 1,
            seed: 11,
            holdout_per_cell: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub shape_accuracy: f64,
    pub palette_accuracy: f64,
    pub holdout_size: usize,
}

impl ProbeReport {
    pub fn passes(&self) -> bool {
        self.shape_accuracy >= GATE_ACCURACY && self.palette_accuracy >= GATE_ACCURACY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    params: ParamStore,
    hidden: usize,
    feature_dim: usize,
}

const IN: usize = IMAGE_SIZE * IMAGE_SIZE;

struct Tape {
    x: Mat,
    z1: Mat,
    h1: Mat,
    z2: Mat,
    feat: Mat,
}

impl ProbeClassifier {
    pub fn new(hidden: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut dense = |name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng| {
            let std = (1.0 / inp as f64).sqrt();
            params.insert(ParamTensor::gaussian(format!("{name}.weight"), vec![out, inp], std, rng)).expect("unique");
            params.insert(ParamTensor::zeros(format!("{name}.bias"), vec![out])).expect("unique");
        };
        dense("fc1", hidden, IN, &mut rng);
        dense("fc2", feature_dim, hidden, &mut rng);
        dense("shape_head", SHAPES.len(), feature_dim, &mut rng);
        dense("palette_head", PALETTES.len(), feature_dim, &mut rng);
        Self { params, hidden, feature_dim }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn w(&self, id: &str) -> Vec<f64> {
        self.params.get(id).expect("probe parameter").to_f64()
    }

    fn run(&self, x: Mat) -> (Tape, Mat, Mat) {
        let z1 = linear(&x, &self.w("fc1.weight"), Some(&self.w("fc1.bias")), self.hidden);
        let h1 = silu(&z1);
        let z2 = linear(&h1, &self.w("fc2.weight"), Some(&self.w("fc2.bias")), self.feature_dim);
        let feat = silu(&z2);
        let ls = linear(&feat, &self.w("shape_head.weight"), Some(&self.w("shape_head.bias")), SHAPES.len());
        let lp = linear(&feat, &self.w("palette_head.weight"), Some(&self.w("palette_head.bias")), PALETTES.len());
        (Tape { x, z1, h1, z2, feat }, ls, lp)
    }

    fn input(images: &[&[f32]]) -> Mat {
        let mut x = Mat::zeros(images.len(), IN);
        for (r, img) in images.iter().enumerate() {
            for (d, &v) in x.row_mut(r).iter_mut().zip(img.iter()) {
                *d = 2.0 * v as f64 - 1.0;
            }
        }
        x
    }

    /// Penultimate-layer features, one row per image.
    pub fn features_batch(&self, images: &[&[f32]]) -> Mat {
        self.run(Self::input(images)).0.feat
    }

    pub fn features(&self, image: &[f32]) -> Vec<f64> {
        self.features_batch(&[image]).data
    }

    /// Predicted (shape, palette) per image.
    pub fn predict_batch(&self, images: &[&[f32]]) -> Vec<(usize, usize)> {
        let (_, ls, lp) = self.run(Self::input(images));
        (0..images.len()).map(|r| (argmax(ls.row(r)), argmax(lp.row(r)))).collect()
    }

    pub fn predict(&self, image: &[f32]) -> (usize, usize) {
        self.predict_batch(&[image])[0]
    }

    pub fn predict_attribute(&self, image: &[f32], attribute: Attribute) -> usize {
        let (s, p) = self.predict(image);
        match attribute {
            Attribute::Shape => s,
            Attribute::Palette => p,
        }
    }

    /// Per-head accuracy in `[0, 1]`.
    pub fn accuracy(&self, images: &[&LabeledImage]) -> (f64, f64) {
        if images.is_empty() {
            return (0.0, 0.0);
        }
        let px: Vec<&[f32]> = images.iter().map(|i| i.pixels.as_slice()).collect();
        let pred = self.predict_batch(&px);
        let (mut s, mut p) = (0usize, 0usize);
        for (img, (ps, pp)) in images.iter().zip(pred) {
            s += (img.shape == ps) as usize;
            p += (img.palette == pp) as usize;
        }
        (s as f64 / images.len() as f64, p as f64 / images.len() as f64)
    }

    fn backward(&self, tape: &Tape, dls: &Mat, dlp: &Mat) -> Gradients {
        let mut g = Gradients::new();
        let mut dfeat = Mat::zeros(tape.feat.rows, self.feature_dim);
        for (head, dl) in [("shape_head", dls), ("palette_head", dlp)] {
            let w = self.w(&format!("{head}.weight"));
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; dl.cols];
            let dx = linear_backward(&tape.feat, &w, dl, Some(&mut dw), Some(&mut db));
            dfeat.add_assign(&dx);
            g.insert(format!("{head}.weight"), dw);
            g.insert(format!("{head}.bias"), db);
        }
        let dz2 = silu_backward(&tape.z2, &dfeat);
        let w2 = self.w("fc2.weight");
        let (mut dw2, mut db2) = (vec![0.0; w2.len()], vec![0.0; self.feature_dim]);
        let dh1 = linear_backward(&tape.h1, &w2, &dz2, Some(&mut dw2), Some(&mut db2));
        let dz1 = silu_backward(&tape.z1, &dh1);
        let w1 = self.w("fc1.weight");
        let (mut dw1, mut db1) = (vec![0.0; w1.len()], vec![0.0; self.hidden]);
        linear_backward(&tape.x, &w1, &dz1, Some(&mut dw1), Some(&mut db1));
        g.insert("fc2.weight", dw2);
        g.insert("fc2.bias", db2);
        g.insert("fc1.weight", dw1);
        g.insert("fc1.bias", db1);
        g
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(b"FPRB");
        w.u16(1);
        w.u32(self.hidden as u32);
        w.u32(self.feature_dim as u32);
        for p in self.params.iter() {
            w.str(&p.layer_id);
            w.f32s(&p.values);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != b"FPRB" || r.u16()? != 1 {
            return Err(FadeError::Format("not a probe file".into()));
        }
        let hidden = r.u32()? as usize;
        let feature_dim = r.u32()? as usize;
        let mut probe = Self::new(hidden, feature_dim, 0);
        let ids: Vec<String> = probe.params.ids().map(|s| s.to_string()).collect();
        for id in ids {
            let got = r.str()?;
            if got != id {
                return Err(FadeError::Format(format!("probe file: expected {id}, found {got}")));
            }
            let p = probe.params.get_mut(&id).expect("present");
            p.values = r.f32s(p.values.len())?;
        }
        if !r.is_empty() {
            return Err(FadeError::Format("trailing bytes after probe".into()));
        }
        Ok(probe)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn augment(img: &[f32], cfg: &ProbeConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let s = cfg.max_shift as i64;
    let (dx, dy) = if s > 0 { (rng.gen_range(-s..=s), rng.gen_range(-s..=s)) } else { (0, 0) };
    let n = IMAGE_SIZE as i64;
    let mut out = vec![0.0f32; img.len()];
    for y in 0..n {
        for x in 0..n {
            let sx = (x - dx).clamp(0, n - 1);
            let sy = (y - dy).clamp(0, n - 1);
            let noise: f64 = rng.sample(StandardNormal);
            out[(y * n + x) as usize] = img[(sy * n + sx) as usize] + (cfg.noise_std * noise) as f32;
        }
    }
    out
}

/// Held-out images drawn from the same generator with a different seed.
pub fn holdout_set(spec: &DatasetSpec, per_cell: usize, data: &ConceptDataset) -> Result<ConceptDataset> {
    let hs = DatasetSpec { seed: spec.seed.wrapping_add(0x9e37_79b9), per_cell, ..spec.clone() };
    ConceptDataset::generate(&hs, data.forget)
}

/// Trains without applying the gate. Returns the held-out report as well.
pub fn train_probe_ungated(data: &ConceptDataset, cfg: &ProbeConfig) -> Result<(ProbeClassifier, ProbeReport)> {
    if data.is_empty() {
        return input_err("cannot train a probe on an empty dataset");
    }
    let mut probe = ProbeClassifier::new(cfg.hidden, cfg.feature_dim, cfg.seed);
    let mut opt = AdamW::new(AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0c1a_55e5);
    for step in 0..cfg.steps {
        let mut imgs = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let img = &data.images[rng.gen_range(0..data.len())];
            imgs.push(augment(&img.pixels, cfg, &mut rng));
            labels.push((img.shape, img.palette));
        }
        let refs: Vec<&[f32]> = imgs.iter().map(|v| v.as_slice()).collect();
        let (tape, ls, lp) = probe.run(ProbeClassifier::input(&refs));
        let n = cfg.batch_size as f64;
        let mut dls = Mat::zeros(ls.rows, ls.cols);
        let mut dlp = Mat::zeros(lp.rows, lp.cols);
        for (r, &(s, p)) in labels.iter().enumerate() {
            let (_, gs) = softmax_cross_entropy(ls.row(r), s);
            let (_, gp) = softmax_cross_entropy(lp.row(r), p);
            dls.row_mut(r).iter_mut().zip(gs).for_each(|(d, g)| *d = g / n);
            dlp.row_mut(r).iter_mut().zip(gp).for_each(|(d, g)| *d = g / n);
        }
        let grads = probe.backward(&tape, &dls, &dlp);
        let lr = crate::optim::lr_at(cfg.learning_rate, crate::optim::SchedulerKind::Cosine, 0, cfg.steps, step);
        opt.step(probe.params.iter_mut().map(|p| (p.layer_id.clone(), &mut p.values)), &grads, lr);
    }
    let hold = holdout_set(&data.spec, cfg.holdout_per_cell, data)?;
    let all: Vec<&LabeledImage> = hold.images.iter().collect();
    let (s, p) = probe.accuracy(&all);
    Ok((probe, ProbeReport { shape_accuracy: s, palette_accuracy: p, holdout_size: all.len() }))
}

/// Trains the probe and enforces the held-out accuracy gate on both heads.
pub fn train_probe(data: &ConceptDataset, cfg: &ProbeConfig) -> Result<(ProbeClassifier, ProbeReport)> {
    let (probe, report) = train_probe_ungated(data, cfg)?;
    if !report.passes() {
        return Err(FadeError::Gate(format!(
            "probe held-out accuracy shape {:.1}%, palette {:.1}% (need {:.0}% each)",
            100.0 * report.shape_accuracy,
            100.0 * report.palette_accuracy,
            100.0 * GATE_ACCURACY
        )));
    }
    Ok((probe, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::Concept;

    fn quick() -> ProbeConfig {
        ProbeConfig { steps: 300, holdout_per_cell: 10, ..ProbeConfig::default() }
    }

    #[test]
    fn single_class_head_fails_the_gate() {
        let mut ds = ConceptDataset::generate(&DatasetSpec { per_cell: 10, ..DatasetSpec::default() }, Concept::shape(0)).unwrap();
        ds.images.retain(|i| i.shape == 2);
        match train_probe(&ds, &quick()) {
            Err(FadeError::Gate(msg)) => assert!(msg.contains("shape")),
            other => panic!("expected a gate failure, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn same_seed_same_weights_and_round_trip() {
        let ds = ConceptDataset::generate(&DatasetSpec { per_cell: 5, ..DatasetSpec::default() }, Concept::shape(0)).unwrap();
        let cfg = ProbeConfig { steps: 20, holdout_per_cell: 2, ..ProbeConfig::default() };
        let (a, _) = train_probe_ungated(&ds, &cfg).unwrap();
        let (b, _) = train_probe_ungated(&ds, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let back = ProbeClassifier::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(back, a);
        assert!(ProbeClassifier::from_bytes(&a.to_bytes()[..10]).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let probe = ProbeClassifier::new(6, 5, 3);
        let img: Vec<f32> = (0..IN).map(|i| ((i * 37) % 17) as f32 / 17.0).collect();
        let loss = |p: &ProbeClassifier| {
            let (_, ls, lp) = p.run(ProbeClassifier::input(&[&img]));
            softmax_cross_entropy(ls.row(0), 1).0 + softmax_cross_entropy(lp.row(0), 2).0
        };
        let (tape, ls, lp) = probe.run(ProbeClassifier::input(&[&img]));
        let dls = Mat::from_vec(1, 4, softmax_cross_entropy(ls.row(0), 1).1);
        let dlp = Mat::from_vec(1, 4, softmax_cross_entropy(lp.row(0), 2).1);
        let g = probe.backward(&tape, &dls, &dlp);
        for id in ["fc1.weight", "fc2.bias", "shape_head.weight", "palette_head.bias"] {
            for i in [0usize, 3] {
                let mut p = probe.clone();
                let orig = p.params.get(id).unwrap().values[i];
                let h = 1e-2f32;
                p.params.get_mut(id).unwrap().values[i] = orig + h;
                let up = loss(&p);
                p.params.get_mut(id).unwrap().values[i] = orig - h;
                let down = loss(&p);
                let num = (up - down) / (2.0 * h as f64);
                let ana = g.get(id).unwrap()[i];
                assert!((num - ana).abs() < 1e-4 + 1e-3 * ana.abs(), "{id}[{i}]: {ana} vs {num}");
            }
        }
    }
}
