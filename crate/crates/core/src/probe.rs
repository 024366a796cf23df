//! Cross-attention heatmaps: capture during sampling, average over heads,
//! attention instances and timesteps, compare, and export.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::SparseAdapter;
use crate::codec::{ByteReader, ByteWriter};
use crate::diffusion::{sample_with_capture, NoiseSchedule};
use crate::error::{input_err, FadeError, Result};
use crate::imageio::{contact_sheet, pgm_bytes_with_comment, upscale};
use crate::substrate::{AttentionRecord, DenoiserNet, Mat};

const RECORD_MAGIC: &[u8; 4] = b"FATT";
const RECORD_VERSION: u16 = 1;

/// Mean attention paid by each image token to one condition token, laid
/// out on the token grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedMap {
    pub side: usize,
    pub token_index: usize,
    /// Row-major `side × side` values.
    pub values: Vec<f64>,
    /// The `(layer, head, t)` triples averaged into this map.
    pub sources: Vec<(String, usize, usize)>,
}

impl AggregatedMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    /// Values rescaled to `[0, 1]` by this map's own min and max, with the
    /// range that was used. A constant map becomes all zeros.
    pub fn normalized(&self) -> (Vec<f32>, f64, f64) {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let px = self.values.iter().map(|v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 }).collect();
        (px, lo, hi)
    }

    /// Raw values, one grid row per CSV line.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        for r in 0..self.side {
            let row: Vec<String> = self.values[r * self.side..(r + 1) * self.side].iter().map(|v| format!("{v:.9}")).collect();
            w.write_record(&row).map_err(|e| FadeError::Format(e.to_string()))?;
        }
        w.into_inner().map_err(|e| FadeError::Format(e.to_string()))
    }

    /// Min-max normalized PGM, upscaled by `factor`, with the raw range in
    /// the header comment.
    pub fn to_pgm(&self, factor: usize) -> Vec<u8> {
        let (px, lo, hi) = self.normalized();
        let (w, h, px) = upscale(self.side, self.side, &px, factor.max(1));
        let note = format!("min-max normalized per map; raw min {lo:.9} max {hi:.9}; token {}", self.token_index);
        pgm_bytes_with_comment(w, h, &px, Some(&note))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        std::fs::write(dir.join(format!("{stem}.pgm")), self.to_pgm(8))?;
        Ok(())
    }
}

/// Samples once with capture on and returns one record per (layer, head,
/// timestep).
pub fn capture_run(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    cond: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<Vec<AttentionRecord>> {
    Ok(sample_with_capture(net, adapter, cond, sched, seed, true)?.1)
}

fn check_records(records: &[AttentionRecord], token_index: usize) -> Result<(usize, usize, usize)> {
    let first = records.first().ok_or_else(|| FadeError::Input("no attention records to aggregate".into()))?;
    let (rows, cols) = (first.weights.rows, first.weights.cols);
    if let Some(r) = records.iter().find(|r| r.weights.rows != rows || r.weights.cols != cols) {
        return input_err(format!(
            "record (layer {}, head {}, t {}) is {}×{}, expected {rows}×{cols}",
            r.layer_id, r.head, r.t, r.weights.rows, r.weights.cols
        ));
    }
    if token_index >= cols {
        return input_err(format!("token index {token_index} out of range for {cols} condition tokens"));
    }
    let side = (rows as f64).sqrt().round() as usize;
    if side * side != rows {
        return input_err(format!("{rows} image tokens do not form a square grid"));
    }
    Ok((rows, cols, side))
}

type Grouped<'a> = BTreeMap<usize, BTreeMap<&'a str, Vec<&'a AttentionRecord>>>;

fn group(records: &[AttentionRecord]) -> Grouped<'_> {
    let mut g: Grouped = BTreeMap::new();
    for r in records {
        g.entry(r.t).or_default().entry(r.layer_id.as_str()).or_default().push(r);
    }
    g
}

fn column(m: &Mat, c: usize) -> impl Iterator<Item = f64> + '_ {
    (0..m.rows).map(move |r| m.at(r, c))
}

/// Heads, then instances, averaged for one timestep.
fn timestep_mean(instances: &BTreeMap<&str, Vec<&AttentionRecord>>, rows: usize, token: usize) -> Vec<f64> {
    let mut acc = vec![0.0; rows];
    for heads in instances.values() {
        let mut inst = vec![0.0; rows];
        for r in heads {
            for (a, v) in inst.iter_mut().zip(column(&r.weights, token)) {
                *a += v;
            }
        }
        for (a, v) in acc.iter_mut().zip(&inst) {
            *a += v / heads.len() as f64;
        }
    }
    acc.iter_mut().for_each(|a| *a /= instances.len() as f64);
    acc
}

fn sources_of<'a>(recs: impl Iterator<Item = &'a AttentionRecord>) -> Vec<(String, usize, usize)> {
    let mut s: Vec<(String, usize, usize)> = recs.map(|r| (r.layer_id.clone(), r.head, r.t)).collect();
    s.sort();
    s.dedup();
    s
}

/// Mean over heads within each attention instance, then over instances,
/// then over timesteps, for one condition-token column.
pub fn aggregate(records: &[AttentionRecord], token_index: usize) -> Result<AggregatedMap> {
    let (rows, _, side) = check_records(records, token_index)?;
    let grouped = group(records);
    let mut acc = vec![0.0; rows];
    for instances in grouped.values() {
        for (a, v) in acc.iter_mut().zip(timestep_mean(instances, rows, token_index)) {
            *a += v;
        }
    }
    acc.iter_mut().for_each(|a| *a /= grouped.len() as f64);
    Ok(AggregatedMap { side, token_index, values: acc, sources: sources_of(records.iter()) })
}

/// One map per timestep in denoising order (highest `t` first).
pub fn per_timestep_maps(records: &[AttentionRecord], token_index: usize) -> Result<Vec<AggregatedMap>> {
    let (rows, _, side) = check_records(records, token_index)?;
    Ok(group(records)
        .iter()
        .rev()
        .map(|(_, instances)| AggregatedMap {
            side,
            token_index,
            values: timestep_mean(instances, rows, token_index),
            sources: sources_of(instances.values().flatten().copied()),
        })
        .collect())
}

/// Mean absolute difference and cosine similarity of two maps.
pub fn compare_maps(m1: &AggregatedMap, m2: &AggregatedMap) -> Result<(f64, f64)> {
    if m1.side != m2.side || m1.values.len() != m2.values.len() {
        return Err(FadeError::ShapeMismatch {
            layer: "attention map".into(),
            expected: vec![m1.side, m1.side],
            found: vec![m2.side, m2.side],
        });
    }
    let n = m1.values.len() as f64;
    let l1 = m1.values.iter().zip(&m2.values).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    Ok((l1, crate::eval::metrics::cosine(&m1.values, &m2.values)))
}

/// Horizontal strip of per-map normalized heatmaps, upscaled by `factor`.
pub fn strip_pgm(maps: &[AggregatedMap], factor: usize) -> Result<Vec<u8>> {
    let first = maps.first().ok_or_else(|| FadeError::Input("no maps for a strip".into()))?;
    if maps.iter().any(|m| m.side != first.side) {
        return input_err("maps in a strip must share one grid size");
    }
    let imgs: Vec<Vec<f32>> = maps.iter().map(|m| m.normalized().0).collect();
    let (w, h, px) = contact_sheet(&imgs, first.side, imgs.len());
    let (w, h, px) = upscale(w, h, &px, factor.max(1));
    Ok(pgm_bytes_with_comment(w, h, &px, Some("each panel min-max normalized on its own; gutters mid-gray")))
}

/// Binary dump: magic, version, count, then per record the layer id,
/// head, timestep, rows, cols and row-major 64-bit weights.
pub fn records_to_bytes(records: &[AttentionRecord]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(RECORD_MAGIC);
    w.u16(RECORD_VERSION);
    w.u32(records.len() as u32);
    for r in records {
        w.str(&r.layer_id);
        w.u32(r.head as u32);
        w.u32(r.t as u32);
        w.u32(r.weights.rows as u32);
        w.u32(r.weights.cols as u32);
        for v in &r.weights.data {
            w.f64(*v);
        }
    }
    w.finish()
}

pub fn records_from_bytes(bytes: &[u8]) -> Result<Vec<AttentionRecord>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != RECORD_MAGIC {
        return Err(FadeError::Format("not an attention record dump".into()));
    }
    let version = r.u16()?;
    if version != RECORD_VERSION {
        return Err(FadeError::Format(format!("unsupported record dump version {version}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let layer_id = r.str()?;
        let head = r.u32()? as usize;
        let t = r.u32()? as usize;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push(AttentionRecord { layer_id, head, t, weights: Mat::from_vec(rows, cols, data) });
    }
    if !r.is_empty() {
        return Err(FadeError::Format("trailing bytes after attention records".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::cond_tokens;
    use crate::substrate::NetConfig;
    use proptest::prelude::*;

    fn rec(layer: &str, head: usize, t: usize, rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> AttentionRecord {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.row_mut(r)[c] = f(r, c);
            }
        }
        AttentionRecord { layer_id: layer.into(), head, t, weights: m }
    }

    /// Rows are softmax-like: positive and summing to one.
    fn stochastic(seed: u64, layer: &str, head: usize, t: usize) -> AttentionRecord {
        let mut m = Mat::zeros(4, 3);
        for r in 0..4 {
            let raw: Vec<f64> = (0..3).map(|c| 1.0 + ((seed * 31 + (r * 3 + c) as u64 * 17) % 13) as f64).collect();
            let s: f64 = raw.iter().sum();
            for c in 0..3 {
                m.row_mut(r)[c] = raw[c] / s;
            }
        }
        AttentionRecord { layer_id: layer.into(), head, t, weights: m }
    }

    fn small_net() -> DenoiserNet {
        DenoiserNet::new(NetConfig { timesteps: 6, ..NetConfig::default() }, 2).unwrap()
    }

    #[test]
    fn counts_and_row_stochastic() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let recs = capture_run(&net, None, &cond_tokens(1, 2), &s, 4).unwrap();
        assert_eq!(recs.len(), 6 * net.config().heads);
        for r in &recs {
            for row in 0..r.weights.rows {
                let sum: f64 = r.weights.row(row).iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(recs, capture_run(&net, None, &cond_tokens(1, 2), &s, 4).unwrap());
    }

    #[test]
    fn identical_records_give_their_column() {
        let r = rec("attn", 0, 0, 4, 3, |r, c| (r * 3 + c) as f64 / 10.0);
        let recs: Vec<_> = (0..3).map(|h| AttentionRecord { head: h, ..r.clone() }).collect();
        let m = aggregate(&recs, 1).unwrap();
        for (a, b) in m.values.iter().zip([0.1, 0.4, 0.7, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(m.side, 2);
    }

    #[test]
    fn two_records_average() {
        let a = rec("attn", 0, 0, 4, 2, |r, _| r as f64);
        let b = rec("attn", 0, 1, 4, 2, |r, _| 10.0 * r as f64);
        let m = aggregate(&[a, b], 0).unwrap();
        assert_eq!(m.values, vec![0.0, 5.5, 11.0, 16.5]);
    }

    #[test]
    fn balanced_order_matches_flat_mean() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let recs = capture_run(&net, None, &cond_tokens(3, 0), &s, 9).unwrap();
        for tok in 0..3 {
            let m = aggregate(&recs, tok).unwrap();
            let mut flat = vec![0.0; m.values.len()];
            for r in &recs {
                for (f, v) in flat.iter_mut().zip(column(&r.weights, tok)) {
                    *f += v / recs.len() as f64;
                }
            }
            for (a, b) in m.values.iter().zip(&flat) {
                assert!((a - b).abs() < 1e-7);
            }
            let per_t = per_timestep_maps(&recs, tok).unwrap();
            assert_eq!(per_t.len(), 6);
            for (i, v) in m.values.iter().enumerate() {
                let mean = per_t.iter().map(|p| p.values[i]).sum::<f64>() / per_t.len() as f64;
                assert!((mean - v).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn inconsistent_shapes_are_rejected() {
        let a = rec("attn", 0, 0, 4, 3, |_, _| 0.0);
        let b = rec("attn", 1, 0, 9, 3, |_, _| 0.0);
        assert!(matches!(aggregate(&[a.clone(), b], 0), Err(FadeError::Input(_))));
        assert!(aggregate(std::slice::from_ref(&a), 3).is_err());
        assert!(aggregate(&[], 0).is_err());
        assert!(aggregate(&[rec("attn", 0, 0, 5, 3, |_, _| 0.0)], 0).is_err());
    }

    #[test]
    fn compare_identities() {
        let m = AggregatedMap { side: 2, token_index: 0, values: vec![0.1, 0.2, 0.3, 0.4], sources: vec![] };
        let (l1, cos) = compare_maps(&m, &m).unwrap();
        assert_eq!(l1, 0.0);
        assert!((cos - 1.0).abs() < 1e-12);
        let d = AggregatedMap { values: m.values.iter().map(|v| 2.0 * v).collect(), ..m.clone() };
        let (l1, cos) = compare_maps(&m, &d).unwrap();
        assert!((l1 - m.mean()).abs() < 1e-12);
        assert!((cos - 1.0).abs() < 1e-12);
        let other = AggregatedMap { side: 3, values: vec![0.0; 9], ..m.clone() };
        assert!(compare_maps(&m, &other).is_err());
    }

    #[test]
    fn exports_are_stable() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let recs = capture_run(&net, None, &cond_tokens(0, 1), &s, 3).unwrap();
        let maps = per_timestep_maps(&recs, 1).unwrap();
        let a = strip_pgm(&maps, 4).unwrap();
        let again = per_timestep_maps(&capture_run(&net, None, &cond_tokens(0, 1), &s, 3).unwrap(), 1).unwrap();
        assert_eq!(a, strip_pgm(&again, 4).unwrap());
        let (w, h, _) = crate::imageio::parse_pgm(&a).unwrap();
        assert_eq!((w, h), ((6 * 9 + 1) * 4, 10 * 4));
        let m = aggregate(&recs, 1).unwrap();
        let pgm = m.to_pgm(2);
        assert!(String::from_utf8_lossy(&pgm[..80]).contains("min-max"));
        let csv = String::from_utf8(m.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 8);
    }

    #[test]
    fn record_dump_round_trip() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let recs = capture_run(&net, None, &cond_tokens(2, 2), &s, 1).unwrap();
        let bytes = records_to_bytes(&recs);
        assert_eq!(records_from_bytes(&bytes).unwrap(), recs);
        assert!(records_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn token_columns_sum_to_one(seed in 0u64..1000, n_t in 1usize..4) {
            let recs: Vec<AttentionRecord> = (0..n_t)
                .flat_map(|t| (0..2).map(move |h| stochastic(seed + t as u64 * 7 + h as u64, "attn", h, t)))
                .collect();
            let maps: Vec<AggregatedMap> = (0..3).map(|c| aggregate(&recs, c).unwrap()).collect();
            for i in 0..4 {
                let total: f64 = maps.iter().map(|m| m.values[i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_invariant(seed in 0u64..1000, rot in 0usize..6) {
            let recs: Vec<AttentionRecord> = (0..3)
                .flat_map(|t| (0..2).map(move |h| stochastic(seed + (t * 2 + h) as u64, "attn", h, t)))
                .collect();
            let mut shuffled = recs.clone();
            shuffled.rotate_left(rot);
            shuffled.reverse();
            let a = aggregate(&recs, 2).unwrap();
            let b = aggregate(&shuffled, 2).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
