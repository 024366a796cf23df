//! Procedurally rendered two-attribute toy images.
//!
//! Every image shows one of four shapes drawn with one of four grayscale
//! palettes (foreground/background intensity pairs), anti-aliased by 4×4
//! supersampling, with per-sample jitter in position and scale. Shape and
//! palette are independent, so forgetting one value of one attribute leaves
//! a same-attribute retain set and a cross-attribute retain set.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, FadeError, Result};
use crate::imageio;

pub const IMAGE_SIZE: usize = 16;
pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const PALETTES: [&str; 4] = ["noir", "paper", "fog", "ember"];
/// (foreground, background) intensity per palette.
pub const PALETTE_LEVELS: [(f32, f32); 4] = [(0.9, 0.1), (0.1, 0.9), (0.9, 0.5), (0.5, 0.1)];

/// Condition token layout: `[BOS, shape, palette]`.
pub const BOS_TOKEN: usize = 0;
pub const VOCAB: usize = 1 + SHAPES.len() + PALETTES.len();
pub const COND_LEN: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Palette,
}

impl Attribute {
    pub fn other(self) -> Self {
        match self {
            Attribute::Shape => Attribute::Palette,
            Attribute::Palette => Attribute::Shape,
        }
    }

    pub fn cardinality(self) -> usize {
        match self {
            Attribute::Shape => SHAPES.len(),
            Attribute::Palette => PALETTES.len(),
        }
    }

    /// Position of this attribute's token in the condition sequence.
    pub fn token_position(self) -> usize {
        match self {
            Attribute::Shape => 1,
            Attribute::Palette => 2,
        }
    }
}

/// One value of one attribute, e.g. `circle` or `fog`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Concept {
    pub attribute: Attribute,
    pub value: usize,
}

impl Concept {
    pub fn shape(value: usize) -> Self {
        Self { attribute: Attribute::Shape, value }
    }

    pub fn palette(value: usize) -> Self {
        Self { attribute: Attribute::Palette, value }
    }

    pub fn parse(name: &str) -> Result<Self> {
        if let Some(i) = SHAPES.iter().position(|s| *s == name) {
            return Ok(Self::shape(i));
        }
        if let Some(i) = PALETTES.iter().position(|s| *s == name) {
            return Ok(Self::palette(i));
        }
        Err(FadeError::Config(format!("unknown concept '{name}'")))
    }

    pub fn name(&self) -> &'static str {
        match self.attribute {
            Attribute::Shape => SHAPES[self.value],
            Attribute::Palette => PALETTES[self.value],
        }
    }

    pub fn token(&self) -> usize {
        match self.attribute {
            Attribute::Shape => 1 + self.value,
            Attribute::Palette => 1 + SHAPES.len() + self.value,
        }
    }

    pub fn all(attribute: Attribute) -> Vec<Concept> {
        (0..attribute.cardinality()).map(|value| Concept { attribute, value }).collect()
    }

    pub fn matches(&self, shape: usize, palette: usize) -> bool {
        match self.attribute {
            Attribute::Shape => self.value == shape,
            Attribute::Palette => self.value == palette,
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attribute::Shape => "shape",
            Attribute::Palette => "palette",
        })
    }
}

impl fmt::Display for Concept {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn cond_tokens(shape: usize, palette: usize) -> Vec<usize> {
    vec![BOS_TOKEN, Concept::shape(shape).token(), Concept::palette(palette).token()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Forget,
    Retain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub seed: u64,
    pub per_cell: usize,
    /// Maximum centre offset in pixels, uniform in `[-j, j]` per axis.
    pub jitter_pos: f64,
    /// Maximum relative size change, uniform in `[-j, j]`.
    pub jitter_scale: f64,
    /// Nominal half-extent of a shape in pixels.
    pub size: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { seed: 7, per_cell: 200, jitter_pos: 1.0, jitter_scale: 0.12, size: 5.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub shape: usize,
    pub palette: usize,
}

impl LabeledImage {
    pub fn cond(&self) -> Vec<usize> {
        cond_tokens(self.shape, self.palette)
    }

    pub fn label(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Shape => self.shape,
            Attribute::Palette => self.palette,
        }
    }

    /// Pixels mapped from `[0, 1]` to the model's `[-1, 1]` range.
    pub fn model_space(&self) -> Vec<f64> {
        to_model_space(&self.pixels)
    }
}

pub fn to_model_space(px: &[f32]) -> Vec<f64> {
    px.iter().map(|&v| 2.0 * v as f64 - 1.0).collect()
}

pub fn from_model_space(x: &[f64]) -> Vec<f32> {
    x.iter().map(|&v| ((v + 1.0) * 0.5).clamp(0.0, 1.0) as f32).collect()
}

pub fn hflip(px: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; px.len()];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = px[y * side + side - 1 - x];
        }
    }
    out
}

fn inside(shape: usize, dx: f64, dy: f64, s: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= s * s,
        1 => dx.abs() <= 0.85 * s && dy.abs() <= 0.85 * s,
        2 => {
            // upright isosceles triangle, apex at top
            let top = -s;
            let bottom = 0.8 * s;
            if dy < top || dy > bottom {
                return false;
            }
            let half_width = s * (dy - top) / (bottom - top);
            dx.abs() <= half_width
        }
        3 => {
            let arm = 0.35 * s;
            (dx.abs() <= arm && dy.abs() <= s) || (dy.abs() <= arm && dx.abs() <= s)
        }
        _ => false,
    }
}

/// Renders one anti-aliased image.
pub fn render(shape: usize, palette: usize, cx: f64, cy: f64, size: f64) -> Vec<f32> {
    const SS: usize = 4;
    let (fg, bg) = PALETTE_LEVELS[palette];
    let mut px = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let fx = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let fy = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if inside(shape, fx - cx, fy - cy, size) {
                        hits += 1;
                    }
                }
            }
            let cov = hits as f32 / (SS * SS) as f32;
            px[y * IMAGE_SIZE + x] = bg + (fg - bg) * cov;
        }
    }
    px
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptDataset {
    pub spec: DatasetSpec,
    pub forget: Concept,
    pub images: Vec<LabeledImage>,
}

impl ConceptDataset {
    /// Deterministic in `spec`; the forget concept only decides the split.
    pub fn generate(spec: &DatasetSpec, forget: Concept) -> Result<Self> {
        if spec.per_cell == 0 {
            return input_err("per_cell must be at least 1");
        }
        if forget.value >= forget.attribute.cardinality() {
            return input_err(format!("concept value {} out of range", forget.value));
        }
        let mut images = Vec::with_capacity(SHAPES.len() * PALETTES.len() * spec.per_cell);
        let centre = IMAGE_SIZE as f64 / 2.0;
        for shape in 0..SHAPES.len() {
            for palette in 0..PALETTES.len() {
                let cell = (shape * PALETTES.len() + palette) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(cell);
                for _ in 0..spec.per_cell {
                    let cx = centre + rng.gen_range(-1.0..=1.0) * spec.jitter_pos;
                    let cy = centre + rng.gen_range(-1.0..=1.0) * spec.jitter_pos;
                    let s = spec.size * (1.0 + rng.gen_range(-1.0..=1.0) * spec.jitter_scale);
                    images.push(LabeledImage { pixels: render(shape, palette, cx, cy, s), shape, palette });
                }
            }
        }
        Ok(Self { spec: spec.clone(), forget, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn split_of(&self, img: &LabeledImage) -> Split {
        if self.forget.matches(img.shape, img.palette) {
            Split::Forget
        } else {
            Split::Retain
        }
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.split_of(&self.images[i]) == split).collect()
    }

    pub fn forget_set(&self) -> Vec<&LabeledImage> {
        self.images.iter().filter(|i| self.split_of(i) == Split::Forget).collect()
    }

    pub fn retain_set(&self) -> Vec<&LabeledImage> {
        self.images.iter().filter(|i| self.split_of(i) == Split::Retain).collect()
    }

    pub fn of_concept(&self, c: Concept) -> Vec<&LabeledImage> {
        self.images.iter().filter(|i| c.matches(i.shape, i.palette)).collect()
    }

    pub fn cell_count(&self, shape: usize, palette: usize) -> usize {
        self.images.iter().filter(|i| i.shape == shape && i.palette == palette).count()
    }

    /// Short hex digest over the spec and every pixel.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.spec).expect("spec serializes"));
        for img in &self.images {
            h.update([img.shape as u8, img.palette as u8]);
            for v in &img.pixels {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    /// Writes one PGM per image plus `manifest.json` into `dir`.
    pub fn write_manifest(&self, dir: &Path) -> Result<Manifest> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        let mut entries = Vec::with_capacity(self.images.len());
        for (i, img) in self.images.iter().enumerate() {
            let file = format!("images/{i:05}_{}_{}.pgm", SHAPES[img.shape], PALETTES[img.palette]);
            imageio::write_pgm(dir.join(&file), IMAGE_SIZE, IMAGE_SIZE, &img.pixels)?;
            entries.push(ManifestEntry {
                file,
                shape: SHAPES[img.shape].to_string(),
                palette: PALETTES[img.palette].to_string(),
                split: self.split_of(img),
            });
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            forget: self.forget.name().to_string(),
            fingerprint: self.fingerprint(),
            image_size: IMAGE_SIZE,
            images: entries,
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| FadeError::Format(e.to_string()))?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(manifest)
    }

    /// Loads the stored 8-bit images listed in a manifest.
    pub fn read_manifest(dir: &Path) -> Result<(Manifest, Self)> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| FadeError::Format(e.to_string()))?;
        let forget = Concept::parse(&manifest.forget)?;
        let mut images = Vec::with_capacity(manifest.images.len());
        for e in &manifest.images {
            let (w, h, pixels) = imageio::read_pgm(dir.join(&e.file))?;
            if (w, h) != (IMAGE_SIZE, IMAGE_SIZE) {
                return Err(FadeError::Format(format!("{}: expected {IMAGE_SIZE}x{IMAGE_SIZE}", e.file)));
            }
            let shape = Concept::parse(&e.shape)?.value;
            let palette = Concept::parse(&e.palette)?.value;
            images.push(LabeledImage { pixels, shape, palette });
        }
        let ds = Self { spec: manifest.spec.clone(), forget, images };
        Ok((manifest, ds))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub shape: String,
    pub palette: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub forget: String,
    pub fingerprint: String,
    pub image_size: usize,
    pub images: Vec<ManifestEntry>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec { per_cell: 3, ..DatasetSpec::default() }
    }

    #[test]
    fn every_cell_is_populated() {
        let ds = ConceptDataset::generate(&small(), Concept::shape(0)).unwrap();
        assert_eq!(ds.len(), 16 * 3);
        for s in 0..4 {
            for p in 0..4 {
                assert_eq!(ds.cell_count(s, p), 3);
            }
        }
    }

    #[test]
    fn forget_split_is_exactly_the_forget_concept() {
        let ds = ConceptDataset::generate(&small(), Concept::palette(2)).unwrap();
        for img in &ds.images {
            assert_eq!(ds.split_of(img) == Split::Forget, img.palette == 2);
        }
        assert_eq!(ds.forget_set().len(), 12);
        assert_eq!(ds.retain_set().len(), 36);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = ConceptDataset::generate(&small(), Concept::shape(0)).unwrap();
        let b = ConceptDataset::generate(&small(), Concept::shape(0)).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ConceptDataset::generate(&DatasetSpec { seed: 8, ..small() }, Concept::shape(0)).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn pixels_stay_in_palette_range() {
        let ds = ConceptDataset::generate(&small(), Concept::shape(0)).unwrap();
        for img in &ds.images {
            let (fg, bg) = PALETTE_LEVELS[img.palette];
            let (lo, hi) = (fg.min(bg), fg.max(bg));
            assert!(img.pixels.iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
            // the shape covers a visible area
            let covered = img.pixels.iter().filter(|&&v| (v - fg).abs() < 0.05).count();
            assert!(covered > 20, "shape {} covers {covered} pixels", img.shape);
        }
    }

    #[test]
    fn tokens_are_distinct() {
        let mut toks: Vec<usize> =
            Concept::all(Attribute::Shape).into_iter().chain(Concept::all(Attribute::Palette)).map(|c| c.token()).collect();
        toks.push(BOS_TOKEN);
        toks.sort();
        toks.dedup();
        assert_eq!(toks.len(), VOCAB);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = ConceptDataset::generate(&small(), Concept::shape(1)).unwrap();
        let m = ds.write_manifest(dir.path()).unwrap();
        assert_eq!(m.images.len(), ds.len());
        let (m2, back) = ConceptDataset::read_manifest(dir.path()).unwrap();
        assert_eq!(m, m2);
        assert_eq!(back.forget, ds.forget);
        for (a, b) in back.images.iter().zip(&ds.images) {
            assert_eq!((a.shape, a.palette), (b.shape, b.palette));
            for (x, y) in a.pixels.iter().zip(&b.pixels) {
                assert!((x - y).abs() < 0.5 / 255.0 + 1e-6);
            }
        }
    }

    #[test]
    fn unknown_concept_name() {
        assert!(Concept::parse("hexagon").is_err());
        assert_eq!(Concept::parse("fog").unwrap(), Concept::palette(2));
    }
}
