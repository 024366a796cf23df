//! The subcommands as library functions. Each writes into the output root
//! and returns what it produced.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, MaskMode};
use crate::adapter::{load_adapter, SparseAdapter};
use crate::diffusion::data::{ConceptDataset, Manifest};
use crate::diffusion::{train_base, NoiseSchedule};
use crate::error::{FadeError, Result};
use crate::eval::{
    evaluate, peak_memory_bytes, train_probe_ungated, unlearning_curve, EvalContext, MetricsReport, ProbeClassifier, ProbeReport,
    Prototypes, UnlearningCurve, GATE_ACCURACY,
};
use crate::saliency::{block_mask, compute_saliency, load_mask, mask_overlap, save_mask, spearman, threshold_mask, topq_mask};
use crate::saliency::{BinaryMask, OverlapStats, SaliencyMap};
use crate::substrate::{load_checkpoint, save_checkpoint, DenoiserNet};
use crate::unlearn::{run_unlearning, UnlearnResult};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// File layout under the output root.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn probe_dir(&self) -> PathBuf {
        self.root.join("probe")
    }

    pub fn probe_file(&self) -> PathBuf {
        self.probe_dir().join("probe.fprb")
    }

    pub fn base_dir(&self) -> PathBuf {
        self.root.join("base")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.base_dir().join("base.fdnt")
    }

    pub fn unlearn_dir(&self) -> PathBuf {
        self.root.join("unlearn")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }

    pub fn sweep_dir(&self, axis: &str) -> PathBuf {
        self.root.join("sweep").join(axis)
    }

    pub fn mask_stats_dir(&self) -> PathBuf {
        self.root.join("mask_stats")
    }

    pub fn run_log(&self) -> PathBuf {
        self.root.join("run_log.jsonl")
    }
}

/// Written next to every command's outputs. Holds no timestamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub dataset_fingerprint: String,
    pub forget: String,
    pub overwrite: String,
}

/// A loaded experiment: config, resolved output root and the dataset.
pub struct Session {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pub data: ConceptDataset,
    pub sched: NoiseSchedule,
}

impl Session {
    /// Validates the config and regenerates the dataset from its spec.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg.output_root());
        let data = ConceptDataset::generate(&cfg.dataset, cfg.forget_concept()?)?;
        let sched = cfg.schedule()?;
        Ok(Self { cfg, layout, data, sched })
    }

    pub fn with_root(cfg: ExperimentConfig, root: impl Into<PathBuf>) -> Result<Self> {
        let mut s = Self::new(cfg)?;
        s.layout = Layout::new(root);
        Ok(s)
    }

    pub fn manifest(&self, command: &str) -> Result<RunManifest> {
        Ok(RunManifest {
            command: command.into(),
            version: TOOL_VERSION.into(),
            config_hash: self.cfg.hash()?,
            dataset_fingerprint: self.data.fingerprint(),
            forget: self.cfg.forget.clone(),
            overwrite: self.cfg.overwrite.clone(),
        })
    }

    /// Writes `run_manifest.json` and the expanded `config.toml` into `dir`.
    pub fn stamp(&self, dir: &Path, command: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("run_manifest.json"), &self.manifest(command)?)?;
        std::fs::write(dir.join("config.toml"), self.cfg.to_toml_string()?)?;
        Ok(())
    }

    pub fn load_base(&self) -> Result<DenoiserNet> {
        let path = self.layout.base_checkpoint();
        if !path.exists() {
            return Err(FadeError::Config(format!("base checkpoint {} does not exist; run train-base first", path.display())));
        }
        let net = load_checkpoint(&path)?;
        if *net.config() != self.cfg.net {
            return Err(FadeError::Config(format!("{} was trained with a different [net] config", path.display())));
        }
        Ok(net)
    }

    /// Loads the stored probe, or trains it. The held-out report is written
    /// before the gate is applied, so a failing probe leaves its numbers.
    pub fn ensure_probe(&self) -> Result<ProbeClassifier> {
        let path = self.layout.probe_file();
        if path.exists() {
            return ProbeClassifier::load(&path);
        }
        let (probe, report) = train_probe_ungated(&self.data, &self.cfg.probe)?;
        let dir = self.layout.probe_dir();
        std::fs::create_dir_all(&dir)?;
        write_json(&dir.join("report.json"), &report)?;
        check_gate(&report)?;
        probe.save(&path)?;
        self.stamp(&dir, "probe")?;
        Ok(probe)
    }
}

fn check_gate(r: &ProbeReport) -> Result<()> {
    if r.passes() {
        return Ok(());
    }
    Err(FadeError::Gate(format!(
        "probe held-out accuracy shape {:.1}%, palette {:.1}% (need {:.0}% each)",
        100.0 * r.shape_accuracy,
        100.0 * r.palette_accuracy,
        100.0 * GATE_ACCURACY
    )))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).map_err(|e| FadeError::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> FadeError {
    FadeError::Format(e.to_string())
}

pub fn cmd_gen_data(s: &Session) -> Result<Manifest> {
    let dir = s.layout.data();
    let manifest = s.data.write_manifest(&dir)?;
    s.stamp(&dir, "gen-data")?;
    Ok(manifest)
}

/// Fails if a dataset on disk was generated from a different spec.
fn check_stored_dataset(s: &Session) -> Result<()> {
    let path = s.layout.data().join("manifest.json");
    if !path.exists() {
        return Ok(());
    }
    let m: Manifest =
        serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| FadeError::Format(format!("{}: {e}", path.display())))?;
    if m.fingerprint != s.data.fingerprint() {
        return Err(FadeError::Config(format!(
            "{} has fingerprint {}, the config generates {}",
            path.display(),
            m.fingerprint,
            s.data.fingerprint()
        )));
    }
    Ok(())
}

/// Trains the probe if needed, then the base denoiser. Writes `base.fdnt`
/// and `losses.csv` (one row per step).
pub fn cmd_train_base(s: &Session) -> Result<PathBuf> {
    check_stored_dataset(s)?;
    s.ensure_probe()?;
    let res = train_base(&s.data, s.cfg.net, &s.sched, &s.cfg.base)?;
    let dir = s.layout.base_dir();
    std::fs::create_dir_all(&dir)?;
    let path = s.layout.base_checkpoint();
    save_checkpoint(&res.net, &path)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).map_err(csv_err)?;
    for (i, l) in res.losses.iter().enumerate() {
        w.write_record([i.to_string(), format!("{l:.9}")]).map_err(csv_err)?;
    }
    std::fs::write(dir.join("losses.csv"), w.into_inner().map_err(|e| FadeError::Format(e.to_string()))?)?;
    s.stamp(&dir, "train-base")?;
    Ok(path)
}

/// Mask for the configured mode, or `None` for an unmasked adapter.
pub fn build_mask(cfg: &ExperimentConfig, net: &DenoiserNet, data: &ConceptDataset, sched: &NoiseSchedule) -> Result<Option<BinaryMask>> {
    if cfg.mask.mode == MaskMode::None {
        return Ok(None);
    }
    let sal = forget_saliency(cfg, net, data, sched)?;
    let m = &cfg.mask;
    let mask = match (m.mode, m.q, m.gamma) {
        (MaskMode::PerWeight, Some(q), _) => topq_mask(&sal, q)?,
        (MaskMode::PerWeight, None, Some(g)) => threshold_mask(&sal, g)?,
        (MaskMode::PerBlock, Some(q), _) => block_mask(&sal, q, &m.block_spec())?,
        _ => return Err(FadeError::Config("mask mode needs q or gamma".into())),
    };
    Ok(Some(mask.with_fingerprint(data.fingerprint())))
}

fn saliency_on(
    cfg: &ExperimentConfig,
    net: &DenoiserNet,
    images: &[&crate::diffusion::data::LabeledImage],
    sched: &NoiseSchedule,
) -> Result<SaliencyMap> {
    let targets: Vec<&str> = cfg.adapter.targets.iter().map(|t| t.as_str()).collect();
    compute_saliency(net, images, sched, &targets, cfg.mask.saliency_batches, cfg.mask.saliency_batch_size, cfg.mask.saliency_seed)
}

fn forget_saliency(cfg: &ExperimentConfig, net: &DenoiserNet, data: &ConceptDataset, sched: &NoiseSchedule) -> Result<SaliencyMap> {
    saliency_on(cfg, net, &data.forget_set(), sched)
}

pub struct UnlearnOutcome {
    pub dir: PathBuf,
    pub result: UnlearnResult,
    pub mask: Option<BinaryMask>,
    pub curve: UnlearningCurve,
}

/// Runs unlearning against the stored base and writes the adapter, the
/// checkpoints, `losses.csv`, the mask and the alignment curve.
pub fn cmd_unlearn(s: &Session) -> Result<UnlearnOutcome> {
    let base = s.load_base()?;
    let probe = s.ensure_probe()?;
    let dir = s.layout.unlearn_dir();
    let protos = Prototypes::build(&probe, &s.data)?;
    let (result, mask, curve) = unlearn_into(s, &base, &probe, &protos, &dir)?;
    s.stamp(&dir, "unlearn")?;
    Ok(UnlearnOutcome { dir, result, mask, curve })
}

/// The body of an unlearning run, shared with the sweep.
pub(crate) fn unlearn_into(
    s: &Session,
    base: &DenoiserNet,
    probe: &ProbeClassifier,
    protos: &Prototypes,
    dir: &Path,
) -> Result<(UnlearnResult, Option<BinaryMask>, UnlearningCurve)> {
    let ow = s.cfg.overwrite_spec()?;
    let mask = build_mask(&s.cfg, base, &s.data, &s.sched)?;
    let result = run_unlearning(base, &s.data, &ow, mask.as_ref(), &s.cfg.adapter, &s.cfg.unlearn, &s.sched)?;
    result.write(dir)?;
    if let Some(m) = &mask {
        save_mask(m, dir.join("mask.fmsk"))?;
    }
    let curve = unlearning_curve(base, &result.checkpoints, ow.forget, ow.overwrite, probe, protos, &s.sched, &s.cfg.eval)?;
    std::fs::write(dir.join("curve.csv"), curve.to_csv()?)?;
    Ok((result, mask, curve))
}

/// A model to evaluate or probe: the base network, or the base with an
/// adapter file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelRef {
    Base,
    Adapter(PathBuf),
}

impl ModelRef {
    /// `base`, an adapter file, or a run directory holding `adapter.fade`.
    pub fn parse(text: &str) -> Self {
        if text == "base" {
            return ModelRef::Base;
        }
        let p = PathBuf::from(text);
        if p.is_dir() {
            ModelRef::Adapter(p.join("adapter.fade"))
        } else {
            ModelRef::Adapter(p)
        }
    }

    /// Short name used for output directories.
    pub fn name(&self) -> String {
        match self {
            ModelRef::Base => "base".into(),
            ModelRef::Adapter(p) => {
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                match (stem.as_str(), p.parent().and_then(|d| d.file_name())) {
                    ("adapter", Some(d)) => d.to_string_lossy().into_owned(),
                    _ => stem,
                }
            }
        }
    }

    pub fn load_adapter(&self) -> Result<Option<SparseAdapter>> {
        match self {
            ModelRef::Base => Ok(None),
            ModelRef::Adapter(p) => {
                if !p.exists() {
                    return Err(FadeError::Config(format!("adapter {} does not exist", p.display())));
                }
                Ok(Some(load_adapter(p)?))
            }
        }
    }
}

/// `base` plus the unlearning run's adapter when there is one.
pub fn default_models(layout: &Layout) -> Vec<ModelRef> {
    let mut v = vec![ModelRef::Base];
    let ad = layout.unlearn_dir().join("adapter.fade");
    if ad.exists() {
        v.push(ModelRef::Adapter(ad));
    }
    v
}

/// Row of `eval/summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model: String,
    pub report: MetricsReport,
}

/// Evaluates each model into `eval/<name>/` and writes `eval/summary.csv`
/// with deltas against the base model.
pub fn cmd_eval(s: &Session, models: &[ModelRef]) -> Result<Vec<EvalSummary>> {
    let net = s.load_base()?;
    let probe = s.ensure_probe()?;
    let protos = Prototypes::build(&probe, &s.data)?;
    let ctx = EvalContext { probe: &probe, protos: &protos, data: &s.data, sched: &s.sched, spec: &s.cfg.eval };
    let forget = s.cfg.forget_concept()?;
    let mut out = Vec::with_capacity(models.len());
    for m in models {
        let start = std::time::Instant::now();
        let ad = m.load_adapter()?;
        let (mut report, gens) = evaluate(&ctx, &net, ad.as_ref(), forget)?;
        report.runtime_seconds = start.elapsed().as_secs_f64();
        report.peak_memory_bytes = peak_memory_bytes();
        let dir = s.layout.eval_dir().join(m.name());
        report.write(&dir, &gens)?;
        s.stamp(&dir, "eval")?;
        out.push(EvalSummary { model: m.name(), report });
    }
    let base = match out.iter().find(|e| e.model == "base") {
        Some(b) => Some(b.report.clone()),
        None => {
            let (r, _) = evaluate(&ctx, &net, None, forget)?;
            Some(r)
        }
    };
    std::fs::write(s.layout.eval_dir().join("summary.csv"), summary_csv(&out, base.as_ref())?)?;
    Ok(out)
}

fn summary_csv(rows: &[EvalSummary], base: Option<&MetricsReport>) -> Result<Vec<u8>> {
    let f = |v: f64| format!("{v:.6}");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "ua", "ira", "cra", "fid_retain", "clip_forget", "clip_retain", "d_clip_forget", "d_clip_retain"])
        .map_err(csv_err)?;
    for r in rows {
        let m = &r.report;
        let (df, dr) = base.map(|b| (m.clip_forget - b.clip_forget, m.clip_retain - b.clip_retain)).unwrap_or((0.0, 0.0));
        w.write_record([r.model.clone(), f(m.ua), f(m.ira), f(m.cra), f(m.fid_retain), f(m.clip_forget), f(m.clip_retain), f(df), f(dr)])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub overlap: OverlapStats,
    pub density_forget: f64,
    pub density_overwrite: f64,
    /// Rank correlation of the two saliency maps, when they were computed.
    pub saliency_spearman: Option<f64>,
}

/// Overlap between two stored masks, or between the forget-concept and
/// overwrite-concept masks computed from the base with the configured
/// selector (top 10% per weight when masking is off).
pub fn cmd_mask_stats(s: &Session, masks: Option<(&Path, &Path)>) -> Result<MaskStats> {
    let dir = s.layout.mask_stats_dir();
    std::fs::create_dir_all(&dir)?;
    let (mf, mo, rho) = match masks {
        Some((a, b)) => (load_mask(a)?, load_mask(b)?, None),
        None => {
            let net = s.load_base()?;
            let mut cfg = s.cfg.clone();
            if cfg.mask.mode == MaskMode::None {
                cfg.mask.mode = MaskMode::PerWeight;
                cfg.mask.q = Some(0.1);
                cfg.mask.gamma = None;
            }
            let sf = forget_saliency(&cfg, &net, &s.data, &s.sched)?;
            let so = saliency_on(&cfg, &net, &s.data.of_concept(cfg.overwrite_concept()?), &s.sched)?;
            let select = |sal: &SaliencyMap| -> Result<BinaryMask> {
                match (cfg.mask.mode, cfg.mask.q, cfg.mask.gamma) {
                    (MaskMode::PerBlock, Some(q), _) => block_mask(sal, q, &cfg.mask.block_spec()),
                    (_, Some(q), _) => topq_mask(sal, q),
                    (_, None, Some(g)) => threshold_mask(sal, g),
                    _ => Err(FadeError::Config("mask selector missing".into())),
                }
            };
            let (mf, mo) = (select(&sf)?, select(&so)?);
            save_mask(&mf, dir.join("forget.fmsk"))?;
            save_mask(&mo, dir.join("overwrite.fmsk"))?;
            (mf, mo, Some(spearman(&sf.flat(), &so.flat())))
        }
    };
    let stats = MaskStats {
        overlap: mask_overlap(&mf, &mo)?,
        density_forget: mf.density(),
        density_overwrite: mo.density(),
        saliency_spearman: rho,
    };
    write_json(&dir.join("overlap.json"), &stats)?;
    let o = &stats.overlap;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["jaccard", "frac_f_in_o", "intersection", "union", "count_f", "count_o", "saliency_spearman"]).map_err(csv_err)?;
    w.write_record([
        format!("{:.6}", o.jaccard),
        format!("{:.6}", o.frac_f_in_o),
        o.intersection.to_string(),
        o.union.to_string(),
        o.count_f.to_string(),
        o.count_o.to_string(),
        rho.map(|r| format!("{r:.6}")).unwrap_or_default(),
    ])
    .map_err(csv_err)?;
    std::fs::write(dir.join("overlap.csv"), w.into_inner().map_err(|e| FadeError::Format(e.to_string()))?)?;
    s.stamp(&dir, "mask-stats")?;
    Ok(stats)
}

/// Process exit code for an error: 2 configuration, 3 gate, 4 training,
/// 1 anything else.
pub fn exit_code(e: &FadeError) -> i32 {
    match e {
        FadeError::Config(_) => 2,
        FadeError::Gate(_) => 3,
        FadeError::Training { .. } | FadeError::Numerical(_) => 4,
        _ => 1,
    }
}

/// Appends one line to the run log. This is the only place timestamps
/// are written.
pub fn log_run(layout: &Layout, command: &str, started: std::time::SystemTime, status: &str) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(&layout.root)?;
    let secs = |t: std::time::SystemTime| t.duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let line = serde_json::json!({
        "command": command,
        "started_unix": secs(started),
        "finished_unix": secs(std::time::SystemTime::now()),
        "status": status,
        "version": TOOL_VERSION,
    });
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(layout.run_log())?;
    writeln!(f, "{line}")?;
    Ok(())
}
