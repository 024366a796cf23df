//! The `probe` command: attention heatmaps for each model under the forget
//! and overwrite prompts, their comparison, and checkpoint series.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::commands::{csv_err, ModelRef, Session};
use super::config::MapsConfig;
use crate::adapter::{load_adapter, SparseAdapter};
use crate::diffusion::data::{cond_tokens, Concept, COND_LEN};
use crate::diffusion::NoiseSchedule;
use crate::error::{FadeError, Result};
use crate::eval::metrics::cells_with;
use crate::probe::{aggregate, capture_run, compare_maps, per_timestep_maps, strip_pgm, AggregatedMap};
use crate::substrate::{AttentionRecord, DenoiserNet};

/// Attention records from every cell containing `prompt`, over the
/// configured seeds.
pub fn capture_prompt(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    prompt: Concept,
    sched: &NoiseSchedule,
    cfg: &MapsConfig,
) -> Result<Vec<AttentionRecord>> {
    let jobs: Vec<((usize, usize), u64)> =
        cells_with(prompt).into_iter().flat_map(|c| (0..cfg.seeds as u64).map(move |k| (c, cfg.first_seed + k))).collect();
    let runs: Vec<Result<Vec<AttentionRecord>>> =
        jobs.par_iter().map(|&((s, p), seed)| capture_run(net, adapter, &cond_tokens(s, p), sched, seed)).collect();
    let mut out = Vec::new();
    for r in runs {
        out.extend(r?);
    }
    Ok(out)
}

/// Aggregated maps for every condition token, for one model and prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSet {
    pub model: String,
    pub prompt: Concept,
    pub tokens: Vec<AggregatedMap>,
    pub strips: Vec<Vec<AggregatedMap>>,
}

impl MapSet {
    pub fn label(&self) -> String {
        format!("{}@{}", self.model, self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub a: String,
    pub b: String,
    pub token: usize,
    pub l1: f64,
    pub cosine: f64,
}

/// Where a model's forget-prompt map sits between the base model's maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub model: String,
    pub token: usize,
    pub l1_to_base_overwrite: f64,
    pub l1_to_base_forget: f64,
    pub closer_to_overwrite: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub sets: Vec<MapSet>,
    pub compare: Vec<CompareRow>,
    pub trend: Vec<TrendRow>,
    pub series: Vec<(usize, AggregatedMap)>,
}

fn map_set(net: &DenoiserNet, ad: Option<&SparseAdapter>, model: &str, prompt: Concept, s: &Session) -> Result<MapSet> {
    let recs = capture_prompt(net, ad, prompt, &s.sched, &s.cfg.maps)?;
    let n_tokens = recs.first().map(|r| r.weights.cols).unwrap_or(COND_LEN);
    let mut tokens = Vec::with_capacity(n_tokens);
    let mut strips = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        tokens.push(aggregate(&recs, i)?);
        strips.push(per_timestep_maps(&recs, i)?);
    }
    Ok(MapSet { model: model.to_string(), prompt, tokens, strips })
}

fn write_set(set: &MapSet, root: &Path, scale: usize) -> Result<()> {
    let dir = root.join(&set.model).join(set.prompt.name());
    for (i, m) in set.tokens.iter().enumerate() {
        m.write(&dir, &format!("token_{i}"))?;
        std::fs::write(dir.join(format!("strip_token_{i}.pgm")), strip_pgm(&set.strips[i], scale)?)?;
    }
    Ok(())
}

/// Maps under the forget and overwrite prompts for each model (the base
/// model is always included), pairwise comparisons on the forgotten
/// attribute's token, the trend summary, and optionally one map per
/// checkpoint of an unlearning run directory.
pub fn cmd_probe(s: &Session, models: &[ModelRef], series: Option<&Path>) -> Result<ProbeOutcome> {
    let net = s.load_base()?;
    let ow = s.cfg.overwrite_spec()?;
    let token = ow.forget.attribute.token_position();
    let root = s.layout.maps_dir();
    std::fs::create_dir_all(&root)?;
    let scale = s.cfg.maps.scale.max(1);

    let mut refs = vec![ModelRef::Base];
    for m in models {
        if !refs.iter().any(|r| r.name() == m.name()) {
            refs.push(m.clone());
        }
    }
    let mut sets = Vec::new();
    for m in &refs {
        let ad = m.load_adapter()?;
        for prompt in [ow.forget, ow.overwrite] {
            let set = map_set(&net, ad.as_ref(), &m.name(), prompt, s)?;
            write_set(&set, &root, scale)?;
            sets.push(set);
        }
    }

    let mut compare = Vec::new();
    for i in 0..sets.len() {
        for j in i + 1..sets.len() {
            let (l1, cosine) = compare_maps(&sets[i].tokens[token], &sets[j].tokens[token])?;
            compare.push(CompareRow { a: sets[i].label(), b: sets[j].label(), token, l1, cosine });
        }
    }
    let find = |model: &str, c: Concept| -> Result<&MapSet> {
        sets.iter().find(|x| x.model == model && x.prompt == c).ok_or_else(|| FadeError::State(format!("missing map set {model}@{c}")))
    };
    let base_f = find("base", ow.forget)?;
    let base_o = find("base", ow.overwrite)?;
    let mut trend = Vec::new();
    for m in refs.iter().skip(1) {
        let post = find(&m.name(), ow.forget)?;
        let (to_o, _) = compare_maps(&post.tokens[token], &base_o.tokens[token])?;
        let (to_f, _) = compare_maps(&post.tokens[token], &base_f.tokens[token])?;
        trend.push(TrendRow {
            model: m.name(),
            token,
            l1_to_base_overwrite: to_o,
            l1_to_base_forget: to_f,
            closer_to_overwrite: to_o < to_f,
        });
    }

    let series = match series {
        Some(dir) => probe_series(s, &net, dir, ow.forget, token, &root.join("series"))?,
        None => Vec::new(),
    };

    std::fs::write(root.join("compare.csv"), compare_csv(&compare)?)?;
    std::fs::write(root.join("trend.csv"), trend_csv(&trend)?)?;
    s.stamp(&root, "probe")?;
    Ok(ProbeOutcome { sets, compare, trend, series })
}

/// One forget-token map per stored checkpoint, plus a strip of all of them.
fn probe_series(
    s: &Session,
    net: &DenoiserNet,
    run_dir: &Path,
    prompt: Concept,
    token: usize,
    out: &Path,
) -> Result<Vec<(usize, AggregatedMap)>> {
    let ck = run_dir.join("checkpoints");
    let mut files: Vec<(usize, std::path::PathBuf)> = Vec::new();
    let entries = std::fs::read_dir(&ck).map_err(|e| FadeError::Config(format!("cannot read {}: {e}", ck.display())))?;
    for e in entries {
        let p = e?.path();
        let step = p.file_stem().and_then(|x| x.to_str()).and_then(|x| x.strip_prefix("step_")).and_then(|x| x.parse::<usize>().ok());
        if let (Some(step), Some("fade")) = (step, p.extension().and_then(|x| x.to_str())) {
            files.push((step, p));
        }
    }
    if files.is_empty() {
        return Err(FadeError::Config(format!("no checkpoints in {}", ck.display())));
    }
    files.sort();
    std::fs::create_dir_all(out)?;
    let mut maps = Vec::with_capacity(files.len());
    for (step, p) in files {
        let ad = load_adapter(&p)?;
        let recs = capture_prompt(net, Some(&ad), prompt, &s.sched, &s.cfg.maps)?;
        let m = aggregate(&recs, token)?;
        m.write(out, &format!("step_{step:05}"))?;
        maps.push((step, m));
    }
    let only: Vec<AggregatedMap> = maps.iter().map(|(_, m)| m.clone()).collect();
    std::fs::write(out.join("strip.pgm"), strip_pgm(&only, s.cfg.maps.scale.max(1))?)?;
    Ok(maps)
}

fn compare_csv(rows: &[CompareRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["a", "b", "token", "l1", "cosine"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([r.a.clone(), r.b.clone(), r.token.to_string(), format!("{:.9}", r.l1), format!("{:.9}", r.cosine)])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
}

fn trend_csv(rows: &[TrendRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "token", "l1_to_base_overwrite", "l1_to_base_forget", "closer_to_overwrite"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.token.to_string(),
            format!("{:.9}", r.l1_to_base_overwrite),
            format!("{:.9}", r.l1_to_base_forget),
            r.closer_to_overwrite.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
}
