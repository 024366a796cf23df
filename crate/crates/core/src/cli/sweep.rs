//! One-axis ablation sweeps over the unlearning configuration.

use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::commands::{csv_err, unlearn_into, Layout, Session};
use super::config::{ExperimentConfig, MaskMode};
use crate::diffusion::data::Concept;
use crate::error::{FadeError, Result};
use crate::eval::{concept_similarity, evaluate, EvalContext, MetricsReport, ProbeClassifier, Prototypes};
use crate::substrate::DenoiserNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Q,
    Overwrite,
    Lr,
    LoraR,
    LoraAlpha,
    LoraDropout,
    MaxGradNorm,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 7] = [
        SweepAxis::Q,
        SweepAxis::Overwrite,
        SweepAxis::Lr,
        SweepAxis::LoraR,
        SweepAxis::LoraAlpha,
        SweepAxis::LoraDropout,
        SweepAxis::MaxGradNorm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Q => "q",
            SweepAxis::Overwrite => "overwrite",
            SweepAxis::Lr => "lr",
            SweepAxis::LoraR => "lora_r",
            SweepAxis::LoraAlpha => "lora_alpha",
            SweepAxis::LoraDropout => "lora_dropout",
            SweepAxis::MaxGradNorm => "max_grad_norm",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let t = text.to_ascii_lowercase().replace('-', "_");
        Self::ALL.into_iter().find(|a| a.name() == t).ok_or_else(|| FadeError::Config(format!("unknown sweep axis {text:?}")))
    }

    /// The config for one sweep value. A Q sweep with masking off switches
    /// to per-weight masking.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        let num = |v: &str| -> Result<f64> {
            v.trim().parse::<f64>().map_err(|_| FadeError::Config(format!("{}: {v:?} is not a number", self.name())))
        };
        match self {
            SweepAxis::Q => {
                c.mask.q = Some(num(value)?);
                c.mask.gamma = None;
                if c.mask.mode == MaskMode::None {
                    c.mask.mode = MaskMode::PerWeight;
                }
            }
            SweepAxis::Overwrite => c.overwrite = value.trim().to_string(),
            SweepAxis::Lr => c.unlearn.learning_rate = num(value)?,
            SweepAxis::LoraR => {
                c.adapter.rank = value.trim().parse().map_err(|_| FadeError::Config(format!("lora_r: {value:?} is not a whole number")))?
            }
            SweepAxis::LoraAlpha => c.adapter.alpha = num(value)? as f32,
            SweepAxis::LoraDropout => c.adapter.dropout = num(value)? as f32,
            SweepAxis::MaxGradNorm => c.unlearn.max_grad_norm = num(value)?,
        }
        c.validate()?;
        Ok(c)
    }

    /// `all` on the overwrite axis means every other concept of the
    /// forgotten attribute.
    pub fn expand_values(self, cfg: &ExperimentConfig, values: &[String]) -> Result<Vec<String>> {
        if self == SweepAxis::Overwrite && values.len() == 1 && values[0] == "all" {
            let f = cfg.forget_concept()?;
            return Ok(Concept::all(f.attribute).into_iter().filter(|c| *c != f).map(|c| c.name().to_string()).collect());
        }
        if values.is_empty() {
            return Err(FadeError::Config(format!("sweep over {} needs at least one value", self.name())));
        }
        Ok(values.to_vec())
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub report: Option<MetricsReport>,
    /// First checkpoint step at which overwrite alignment beats forget
    /// alignment.
    pub crossing: Option<usize>,
    /// Probe-feature cosine and Fréchet distance between the forget and
    /// overwrite concepts.
    pub similarity: Option<(f64, f64)>,
    pub mask_density: Option<f64>,
    pub error: Option<String>,
}

pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub base: MetricsReport,
    pub rows: Vec<SweepRow>,
}

fn dir_name(i: usize, value: &str) -> String {
    let clean: String = value.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect();
    format!("{i:02}_{clean}")
}

/// One unlearning run plus evaluation per value, up to `sweep.workers` at
/// a time. A failing entry is recorded and the rest continue.
pub fn cmd_sweep(s: &Session, axis: SweepAxis, values: &[String]) -> Result<SweepOutcome> {
    let values = axis.expand_values(&s.cfg, values)?;
    let base = s.load_base()?;
    let probe = s.ensure_probe()?;
    let protos = Prototypes::build(&probe, &s.data)?;
    let forget = s.cfg.forget_concept()?;
    let ctx = EvalContext { probe: &probe, protos: &protos, data: &s.data, sched: &s.sched, spec: &s.cfg.eval };
    let (base_report, _) = evaluate(&ctx, &base, None, forget)?;
    let root = s.layout.sweep_dir(axis.name());
    std::fs::create_dir_all(&root)?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.cfg.sweep.workers).build().map_err(|e| FadeError::State(e.to_string()))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        values
            .par_iter()
            .enumerate()
            .map(|(i, v)| {
                let dir = root.join(dir_name(i, v));
                match run_entry(s, axis, v, &base, &probe, &protos, &dir) {
                    Ok(row) => row,
                    Err(e) => SweepRow {
                        value: v.clone(),
                        report: None,
                        crossing: None,
                        similarity: None,
                        mask_density: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect()
    });
    std::fs::write(root.join("sweep.csv"), sweep_csv(axis, &base_report, &rows)?)?;
    s.stamp(&root, &format!("sweep {axis}"))?;
    Ok(SweepOutcome { axis, base: base_report, rows })
}

fn run_entry(
    s: &Session,
    axis: SweepAxis,
    value: &str,
    base: &DenoiserNet,
    probe: &ProbeClassifier,
    protos: &Prototypes,
    dir: &Path,
) -> Result<SweepRow> {
    let cfg = axis.apply(&s.cfg, value)?;
    let entry = Session { cfg, layout: Layout::new(dir), data: s.data.clone(), sched: s.sched.clone() };
    let (result, mask, curve) = unlearn_into(&entry, base, probe, protos, dir)?;
    let ow = entry.cfg.overwrite_spec()?;
    let ctx = EvalContext { probe, protos, data: &entry.data, sched: &entry.sched, spec: &entry.cfg.eval };
    let (report, gens) = evaluate(&ctx, base, Some(&result.adapter), ow.forget)?;
    report.write(dir, &gens)?;
    let similarity = concept_similarity(ow.forget, ow.overwrite, probe, &entry.data)?;
    entry.stamp(dir, &format!("sweep {axis}={value}"))?;
    Ok(SweepRow {
        value: value.to_string(),
        report: Some(report),
        crossing: curve.crossing,
        similarity: Some(similarity),
        mask_density: mask.map(|m| m.density()),
        error: None,
    })
}

/// One row per value. Deltas are entry minus base.
pub fn sweep_csv(axis: SweepAxis, base: &MetricsReport, rows: &[SweepRow]) -> Result<Vec<u8>> {
    let f = |v: f64| format!("{v:.6}");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "axis",
        "value",
        "status",
        "ua",
        "ira",
        "cra",
        "fid_retain",
        "clip_forget",
        "clip_retain",
        "d_ua",
        "d_ira",
        "d_cra",
        "d_fid_retain",
        "d_clip_forget",
        "d_clip_retain",
        "crossing_step",
        "concept_cosine",
        "concept_fid",
        "mask_density",
        "error",
    ])
    .map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![axis.name().to_string(), r.value.clone()];
        match &r.report {
            Some(m) => {
                rec.push("ok".into());
                for v in [m.ua, m.ira, m.cra, m.fid_retain, m.clip_forget, m.clip_retain] {
                    rec.push(f(v));
                }
                for (a, b) in [
                    (m.ua, base.ua),
                    (m.ira, base.ira),
                    (m.cra, base.cra),
                    (m.fid_retain, base.fid_retain),
                    (m.clip_forget, base.clip_forget),
                    (m.clip_retain, base.clip_retain),
                ] {
                    rec.push(f(a - b));
                }
            }
            None => {
                rec.push("failed".into());
                rec.extend(std::iter::repeat_n(String::new(), 12));
            }
        }
        rec.push(r.crossing.map(|c| c.to_string()).unwrap_or_else(|| if r.report.is_some() { "none".into() } else { String::new() }));
        match r.similarity {
            Some((c, d)) => {
                rec.push(f(c));
                rec.push(f(d));
            }
            None => rec.extend([String::new(), String::new()]),
        }
        rec.push(r.mask_density.map(f).unwrap_or_default());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
}
