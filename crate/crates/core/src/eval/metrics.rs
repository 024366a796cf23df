//! Generation-based metrics: unlearning accuracy, in- and cross-domain
//! retention, Fréchet distance on probe features, prototype alignment and
//! the checkpoint curve.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classifier::ProbeClassifier;
use super::frechet::frechet_distance;
use crate::adapter::SparseAdapter;
use crate::diffusion::data::{cond_tokens, Attribute, Concept, ConceptDataset, IMAGE_SIZE, PALETTES, SHAPES};
use crate::diffusion::{sample_batch, NoiseSchedule, SampleRequest};
use crate::error::{input_err, FadeError, Result};
use crate::imageio::{contact_sheet, upscale, write_pgm};
use crate::substrate::DenoiserNet;

/// Minimum number of real images behind a prototype.
pub const MIN_PROTOTYPE_IMAGES: usize = 50;

/// How many images to generate per (shape, palette) cell and from which
/// seeds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub n_per_cell: usize,
    /// Seeds are `seed, seed + 1, ..., seed + n_per_cell - 1`.
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self { n_per_cell: 10, seed: 1000 }
    }
}

impl EvalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_cell == 0 {
            return Err(FadeError::Config("eval n_per_cell must be at least 1".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_per_cell as u64).map(|k| self.seed + k).collect()
    }
}

/// Anything that labels an image with (shape, palette).
pub trait Labeler {
    fn label_batch(&self, images: &[&[f32]]) -> Vec<(usize, usize)>;
}

impl Labeler for ProbeClassifier {
    fn label_batch(&self, images: &[&[f32]]) -> Vec<(usize, usize)> {
        self.predict_batch(images)
    }
}

fn pick(label: (usize, usize), attribute: Attribute) -> usize {
    match attribute {
        Attribute::Shape => label.0,
        Attribute::Palette => label.1,
    }
}

/// One generated image with the cell it was prompted with.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub shape: usize,
    pub palette: usize,
    pub seed: u64,
    pub pixels: Vec<f32>,
}

impl Generated {
    pub fn value(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Shape => self.shape,
            Attribute::Palette => self.palette,
        }
    }
}

/// Generates `n_per_cell` images for each listed cell, in cell-major order.
pub fn generate_cells(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    cells: &[(usize, usize)],
    sched: &NoiseSchedule,
    spec: &EvalSpec,
) -> Result<Vec<Generated>> {
    spec.validate()?;
    let mut reqs = Vec::with_capacity(cells.len() * spec.n_per_cell);
    let mut meta = Vec::with_capacity(reqs.capacity());
    for &(s, p) in cells {
        for seed in spec.seeds() {
            reqs.push(SampleRequest { cond: cond_tokens(s, p), seed });
            meta.push((s, p, seed));
        }
    }
    let imgs = sample_batch(net, adapter, &reqs, sched)?;
    Ok(meta.into_iter().zip(imgs).map(|((shape, palette, seed), pixels)| Generated { shape, palette, seed, pixels }).collect())
}

/// All sixteen cells, shape-major.
pub fn all_cells() -> Vec<(usize, usize)> {
    (0..SHAPES.len()).flat_map(|s| (0..PALETTES.len()).map(move |p| (s, p))).collect()
}

/// Cells whose prompt contains `c`.
pub fn cells_with(c: Concept) -> Vec<(usize, usize)> {
    all_cells().into_iter().filter(|&(s, p)| c.matches(s, p)).collect()
}

pub fn generate_grid(net: &DenoiserNet, adapter: Option<&SparseAdapter>, sched: &NoiseSchedule, spec: &EvalSpec) -> Result<Vec<Generated>> {
    generate_cells(net, adapter, &all_cells(), sched, spec)
}

fn labels(gens: &[&Generated], probe: &dyn Labeler) -> Vec<(usize, usize)> {
    let px: Vec<&[f32]> = gens.iter().map(|g| g.pixels.as_slice()).collect();
    probe.label_batch(&px)
}

fn accuracy_pct(gens: &[&Generated], attribute: Attribute, probe: &dyn Labeler) -> f64 {
    if gens.is_empty() {
        return 0.0;
    }
    let hits = gens.iter().zip(labels(gens, probe)).filter(|(g, l)| pick(*l, attribute) == g.value(attribute)).count();
    100.0 * hits as f64 / gens.len() as f64
}

/// Percentage of forget-prompt generations the matching head still labels
/// as the forget concept.
pub fn forget_accuracy(gens: &[Generated], forget: Concept, probe: &dyn Labeler) -> f64 {
    let sel: Vec<&Generated> = gens.iter().filter(|g| forget.matches(g.shape, g.palette)).collect();
    accuracy_pct(&sel, forget.attribute, probe)
}

/// `100 - forget accuracy`.
pub fn unlearn_accuracy_of(gens: &[Generated], forget: Concept, probe: &dyn Labeler) -> f64 {
    100.0 - forget_accuracy(gens, forget, probe)
}

/// In-domain retention (same attribute, retained values) and cross-domain
/// retention (other attribute, every generation), as percentages.
pub fn retain_accuracies_of(gens: &[Generated], forget: Concept, probe: &dyn Labeler) -> (f64, f64) {
    let same: Vec<&Generated> = gens.iter().filter(|g| !forget.matches(g.shape, g.palette)).collect();
    let all: Vec<&Generated> = gens.iter().collect();
    (accuracy_pct(&same, forget.attribute, probe), accuracy_pct(&all, forget.attribute.other(), probe))
}

pub fn unlearn_accuracy(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    forget: Concept,
    probe: &dyn Labeler,
    sched: &NoiseSchedule,
    spec: &EvalSpec,
) -> Result<f64> {
    let gens = generate_cells(net, adapter, &cells_with(forget), sched, spec)?;
    Ok(unlearn_accuracy_of(&gens, forget, probe))
}

pub fn retain_accuracies(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    forget: Concept,
    probe: &dyn Labeler,
    sched: &NoiseSchedule,
    spec: &EvalSpec,
) -> Result<(f64, f64)> {
    let gens = generate_grid(net, adapter, sched, spec)?;
    Ok(retain_accuracies_of(&gens, forget, probe))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean probe feature of the real images of each concept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Prototypes {
    pub by_concept: BTreeMap<String, Vec<f64>>,
}

impl Prototypes {
    /// One prototype for every shape and palette concept.
    pub fn build(probe: &ProbeClassifier, data: &ConceptDataset) -> Result<Self> {
        let mut by_concept = BTreeMap::new();
        for attribute in [Attribute::Shape, Attribute::Palette] {
            for c in Concept::all(attribute) {
                by_concept.insert(c.name().to_string(), prototype(probe, data, c)?);
            }
        }
        Ok(Self { by_concept })
    }

    pub fn get(&self, c: Concept) -> Result<&[f64]> {
        self.by_concept
            .get(c.name())
            .map(|v| v.as_slice())
            .ok_or_else(|| FadeError::Input(format!("no prototype for concept {}", c.name())))
    }
}

/// Mean feature over every real image of `c`.
pub fn prototype(probe: &ProbeClassifier, data: &ConceptDataset, c: Concept) -> Result<Vec<f64>> {
    let imgs = data.of_concept(c);
    if imgs.len() < MIN_PROTOTYPE_IMAGES {
        return input_err(format!("concept {} has {} real images, a prototype needs {MIN_PROTOTYPE_IMAGES}", c.name(), imgs.len()));
    }
    let px: Vec<&[f32]> = imgs.iter().map(|i| i.pixels.as_slice()).collect();
    let f = probe.features_batch(&px);
    let mut mean = vec![0.0; f.cols];
    for r in 0..f.rows {
        for (m, v) in mean.iter_mut().zip(f.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= f.rows as f64);
    Ok(mean)
}

/// Cosine between an image's probe feature and a concept prototype.
pub fn alignment_score(image: &[f32], concept: Concept, probe: &ProbeClassifier, protos: &Prototypes) -> Result<f64> {
    let proto = protos.get(concept)?;
    Ok(cosine(&probe.features(image), proto))
}

fn mean_alignment(images: &[&[f32]], proto: &[f64], probe: &ProbeClassifier) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let f = probe.features_batch(images);
    (0..f.rows).map(|r| cosine(f.row(r), proto)).sum::<f64>() / f.rows as f64
}

fn feature_rows(probe: &ProbeClassifier, images: &[&[f32]]) -> Vec<Vec<f64>> {
    let f = probe.features_batch(images);
    (0..f.rows).map(|r| f.row(r).to_vec()).collect()
}

/// Prototype cosine and Fréchet distance between the real images of two
/// concepts.
pub fn concept_similarity(c1: Concept, c2: Concept, probe: &ProbeClassifier, data: &ConceptDataset) -> Result<(f64, f64)> {
    let p1 = prototype(probe, data, c1)?;
    let p2 = prototype(probe, data, c2)?;
    let f1 = feature_rows(probe, &data.of_concept(c1).iter().map(|i| i.pixels.as_slice()).collect::<Vec<_>>());
    let f2 = feature_rows(probe, &data.of_concept(c2).iter().map(|i| i.pixels.as_slice()).collect::<Vec<_>>());
    // order the arguments canonically so swapping c1 and c2 is bit-identical
    let fid = if c1 <= c2 { frechet_distance(&f1, &f2)? } else { frechet_distance(&f2, &f1)? };
    Ok((cosine(&p1, &p2), fid))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub score_forget: f64,
    pub score_overwrite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearningCurve {
    pub points: Vec<CurvePoint>,
    /// First step at which the overwrite score exceeds the forget score.
    pub crossing: Option<usize>,
}

impl UnlearningCurve {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step", "score_forget", "score_overwrite"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.step.to_string(), fmt(p.score_forget), fmt(p.score_overwrite)]).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
    }

    pub fn crossing_label(&self) -> String {
        self.crossing.map(|s| s.to_string()).unwrap_or_else(|| "none".into())
    }
}

/// Mean alignment of forget-prompt generations against the forget and
/// overwrite prototypes, per checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn unlearning_curve(
    net: &DenoiserNet,
    checkpoints: &[(usize, SparseAdapter)],
    forget: Concept,
    overwrite: Concept,
    probe: &ProbeClassifier,
    protos: &Prototypes,
    sched: &NoiseSchedule,
    spec: &EvalSpec,
) -> Result<UnlearningCurve> {
    if checkpoints.len() < 2 {
        return input_err("an unlearning curve needs at least two checkpoints");
    }
    let pf = protos.get(forget)?;
    let po = protos.get(overwrite)?;
    let cells = cells_with(forget);
    let mut points = Vec::with_capacity(checkpoints.len());
    for (step, ad) in checkpoints {
        let gens = generate_cells(net, Some(ad), &cells, sched, spec)?;
        let px: Vec<&[f32]> = gens.iter().map(|g| g.pixels.as_slice()).collect();
        points.push(CurvePoint {
            step: *step,
            score_forget: mean_alignment(&px, pf, probe),
            score_overwrite: mean_alignment(&px, po, probe),
        });
    }
    let crossing = points.iter().find(|p| p.score_overwrite > p.score_forget).map(|p| p.step);
    Ok(UnlearningCurve { points, crossing })
}

/// Per-concept accuracy and alignment of the generations containing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRow {
    pub concept: String,
    pub attribute: Attribute,
    pub forgotten: bool,
    pub accuracy: f64,
    pub alignment: f64,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub forget_concept: String,
    pub ua: f64,
    pub ira: f64,
    pub cra: f64,
    pub fid_retain: f64,
    pub clip_forget: f64,
    pub clip_retain: f64,
    pub per_concept: Vec<ConceptRow>,
    pub runtime_seconds: f64,
    pub peak_memory_bytes: u64,
}

/// The reference data a report is measured against.
pub struct EvalContext<'a> {
    pub probe: &'a ProbeClassifier,
    pub protos: &'a Prototypes,
    pub data: &'a ConceptDataset,
    pub sched: &'a NoiseSchedule,
    pub spec: &'a EvalSpec,
}

/// Full report for one model. `runtime_seconds` and `peak_memory_bytes`
/// are left at zero for the caller to fill in.
pub fn evaluate(
    ctx: &EvalContext,
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    forget: Concept,
) -> Result<(MetricsReport, Vec<Generated>)> {
    let gens = generate_grid(net, adapter, ctx.sched, ctx.spec)?;
    let report = report_from(ctx, &gens, forget)?;
    Ok((report, gens))
}

/// Builds the report from an existing generation grid.
pub fn report_from(ctx: &EvalContext, gens: &[Generated], forget: Concept) -> Result<MetricsReport> {
    let probe = ctx.probe;
    let ua = unlearn_accuracy_of(gens, forget, probe);
    let (ira, cra) = retain_accuracies_of(gens, forget, probe);

    let retain_gens: Vec<&[f32]> = gens.iter().filter(|g| !forget.matches(g.shape, g.palette)).map(|g| g.pixels.as_slice()).collect();
    let forget_gens: Vec<&[f32]> = gens.iter().filter(|g| forget.matches(g.shape, g.palette)).map(|g| g.pixels.as_slice()).collect();
    let real_retain: Vec<&[f32]> = ctx.data.retain_set().iter().map(|i| i.pixels.as_slice()).collect();
    let fid_retain = frechet_distance(&feature_rows(probe, &retain_gens), &feature_rows(probe, &real_retain))?;

    let clip_forget = mean_alignment(&forget_gens, ctx.protos.get(forget)?, probe);
    // retained generations are scored against their own value of the
    // forgotten attribute
    let mut retain_sum = 0.0;
    let mut retain_n = 0usize;
    for g in gens.iter().filter(|g| !forget.matches(g.shape, g.palette)) {
        let own = Concept { attribute: forget.attribute, value: g.value(forget.attribute) };
        retain_sum += cosine(&probe.features(&g.pixels), ctx.protos.get(own)?);
        retain_n += 1;
    }
    let clip_retain = if retain_n == 0 { 0.0 } else { retain_sum / retain_n as f64 };

    let mut per_concept = Vec::new();
    for attribute in [Attribute::Shape, Attribute::Palette] {
        for c in Concept::all(attribute) {
            let sel: Vec<&Generated> = gens.iter().filter(|g| c.matches(g.shape, g.palette)).collect();
            let px: Vec<&[f32]> = sel.iter().map(|g| g.pixels.as_slice()).collect();
            per_concept.push(ConceptRow {
                concept: c.name().to_string(),
                attribute,
                forgotten: c == forget,
                accuracy: accuracy_pct(&sel, attribute, probe),
                alignment: mean_alignment(&px, ctx.protos.get(c)?, probe),
                images: sel.len(),
            });
        }
    }
    Ok(MetricsReport {
        forget_concept: forget.name().to_string(),
        ua,
        ira,
        cra,
        fid_retain,
        clip_forget,
        clip_retain,
        per_concept,
        runtime_seconds: 0.0,
        peak_memory_bytes: 0,
    })
}

/// Peak resident set size of this process, or 0 where unavailable.
pub fn peak_memory_bytes() -> u64 {
    std::fs::read_to_string("/proc/self/status")
        .ok()
        .and_then(|s| {
            s.lines().find(|l| l.starts_with("VmHWM:")).and_then(|l| l.split_whitespace().nth(1)).and_then(|kb| kb.parse::<u64>().ok())
        })
        .map(|kb| kb * 1024)
        .unwrap_or(0)
}

fn csv_err(e: csv::Error) -> FadeError {
    FadeError::Format(e.to_string())
}

/// Fixed-precision formatting keeps CSV bytes stable across platforms.
pub(crate) fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

impl MetricsReport {
    /// Per-concept table followed by the summary metrics. Runtime and
    /// memory are deliberately left out so reruns give identical bytes.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["concept", "attribute", "forgotten", "accuracy", "alignment", "images"]).map_err(csv_err)?;
        for r in &self.per_concept {
            w.write_record([
                r.concept.clone(),
                r.attribute.to_string(),
                r.forgotten.to_string(),
                fmt(r.accuracy),
                fmt(r.alignment),
                r.images.to_string(),
            ])
            .map_err(csv_err)?;
        }
        for (k, v) in [
            ("UA", self.ua),
            ("IRA", self.ira),
            ("CRA", self.cra),
            ("FID_retain", self.fid_retain),
            ("CLIP_forget", self.clip_forget),
            ("CLIP_retain", self.clip_retain),
        ] {
            w.write_record([k.to_string(), "summary".into(), String::new(), fmt(v), String::new(), String::new()]).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
    }

    /// Writes `metrics.json`, `metrics.csv` and `samples.pgm` (one row per
    /// cell) into `dir`.
    pub fn write(&self, dir: &Path, gens: &[Generated]) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::to_vec_pretty(self).map_err(|e| FadeError::Format(e.to_string()))?;
        std::fs::write(dir.join("metrics.json"), json)?;
        std::fs::write(dir.join("metrics.csv"), self.to_csv()?)?;
        write_contact_sheet(&dir.join("samples.pgm"), gens)?;
        Ok(())
    }
}

/// One row per prompted cell, images upscaled 3×.
pub fn write_contact_sheet(path: &Path, gens: &[Generated]) -> Result<()> {
    let mut cols = 1;
    while cols < gens.len() && gens[cols].shape == gens[0].shape && gens[cols].palette == gens[0].palette {
        cols += 1;
    }
    let images: Vec<Vec<f32>> = gens.iter().map(|g| g.pixels.clone()).collect();
    let (w, h, px) = contact_sheet(&images, IMAGE_SIZE, cols);
    let (w, h, px) = upscale(w, h, &px, 3);
    write_pgm(path, w, h, &px)
}
