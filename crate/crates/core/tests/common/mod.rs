//! Checks shared by the integration tests and the acceptance gate. Each
//! oracle here is computed independently of the library code under test.

#![allow(dead_code)]

use std::collections::BTreeMap;

use fade::adapter::{merge, unmerge, SparseAdapter};
use fade::diffusion::data::{cond_tokens, ConceptDataset, LabeledImage};
use fade::diffusion::NoiseSchedule;
use fade::saliency::{BinaryMask, Granularity, LayerMask, Selector};
use fade::substrate::{grad_check_report, DenoiserNet, GradCheckInput, GradCheckReport, NetConfig, ADAPTER_TARGETS};
use fade::unlearn::{distill_losses, draw_items, AdapterConfig, OverwriteSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// `(α/r)·Σ_k B[o,k]·A[k,i]` masked, with plain loops over `o`, `i`, `k`.
pub fn triple_loop_delta(out: usize, inp: usize, r: usize, alpha: f64, a: &[f32], b: &[f32], m: &[bool]) -> Vec<f64> {
    let mut d = vec![0.0; out * inp];
    for o in 0..out {
        for i in 0..inp {
            let mut acc = 0.0;
            for k in 0..r {
                acc += b[o * r + k] as f64 * a[k * inp + i] as f64;
            }
            d[o * inp + i] = if m[o * inp + i] { alpha / r as f64 * acc } else { 0.0 };
        }
    }
    d
}

pub fn random_mask(net: &DenoiserNet, targets: &[&str], p: f64, rng: &mut ChaCha8Rng) -> BinaryMask {
    let layers = targets
        .iter()
        .map(|&id| {
            let (o, i) = net.weight_dims(id).unwrap();
            (id.to_string(), LayerMask { shape: vec![o, i], bits: (0..o * i).map(|_| rng.gen_bool(p)).collect() })
        })
        .collect();
    BinaryMask { layers, granularity: Granularity::PerWeight, selector: Selector::Q(p), fingerprint: String::new() }
}

fn fill(v: &mut [f32], std: f64, rng: &mut ChaCha8Rng) {
    for x in v {
        *x = (std * gauss(rng)) as f32;
    }
}

pub struct AlgebraResult {
    pub max_rel_error: f64,
    pub zero_b_exact: bool,
    pub instances: usize,
}

/// Random nets, targets, ranks, alphas, factors and masks; the adapter's
/// delta against the triple-loop oracle.
pub fn adapter_algebra(instances: usize, seed: u64) -> AlgebraResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut zero_ok = true;
    for _ in 0..instances {
        let heads = rng.gen_range(1..=3);
        let cfg = NetConfig {
            image_size: 4,
            patch: 2,
            dim: heads * 2 * rng.gen_range(1..=3),
            heads,
            mlp_hidden: rng.gen_range(2..=12),
            timesteps: 10,
            vocab: 9,
            cond_len: 3,
            ..NetConfig::default()
        };
        let net = DenoiserNet::new(cfg, rng.gen()).unwrap();
        let n_targets = rng.gen_range(1..=ADAPTER_TARGETS.len());
        let targets: Vec<&str> = ADAPTER_TARGETS[..n_targets].to_vec();
        let min_dim = targets.iter().map(|t| {
            let (o, i) = net.weight_dims(t).unwrap();
            o.min(i)
        });
        let r = rng.gen_range(1..=min_dim.min().unwrap());
        let alpha = rng.gen_range(0.1f32..16.0);
        let mask = random_mask(&net, &targets, rng.gen_range(0.0..1.0), &mut rng);
        let cfg =
            AdapterConfig { rank: r, alpha, dropout: 0.0, init_seed: rng.gen(), targets: targets.iter().map(|s| s.to_string()).collect() };
        let mut ad = cfg.attach(&net, Some(&mask)).unwrap();
        for id in ad.layer_ids() {
            if ad.effective_delta(&id).unwrap().data.iter().any(|&v| v != 0.0) {
                zero_ok = false;
            }
        }
        for (_, v) in ad.params_mut() {
            fill(v, 1.0, &mut rng);
        }
        for l in ad.layers() {
            let got = ad.effective_delta(&l.layer_id).unwrap().data;
            let m = &mask.layers[&l.layer_id].bits;
            let want = triple_loop_delta(l.out, l.inp, l.rank, alpha as f64, &l.a, &l.b, m);
            let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
            let err = got.iter().zip(&want).fold(0.0f64, |a, (g, w)| a.max((g - w).abs())) / scale;
            worst = worst.max(err);
        }
    }
    AlgebraResult { max_rel_error: worst, zero_b_exact: zero_ok, instances }
}

/// Finite differences over every base parameter and both adapter factors,
/// with a random mask and nonzero `B` so the masked path carries gradient.
pub fn gradient_check(cfg: NetConfig, seed: u64, inputs: usize, h: f64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = DenoiserNet::new(cfg, seed).unwrap();
    let mask = random_mask(&net, &ADAPTER_TARGETS, 0.5, &mut rng);
    let mut ad =
        AdapterConfig { rank: 2, alpha: 2.0, dropout: 0.0, init_seed: seed, ..AdapterConfig::default() }.attach(&net, Some(&mask)).unwrap();
    for (_, v) in ad.params_mut() {
        fill(v, 0.3, &mut rng);
    }
    let mut total = GradCheckReport::default();
    for _ in 0..inputs {
        let pixels = cfg.pixels();
        let input = GradCheckInput {
            x: (0..pixels).map(|_| gauss(&mut rng)).collect(),
            t: rng.gen_range(0..cfg.timesteps),
            cond: cond_tokens(rng.gen_range(0..4), rng.gen_range(0..4)),
            upstream: (0..pixels).map(|_| gauss(&mut rng)).collect(),
        };
        let r = grad_check_report(&net, &input, h, Some(&ad)).unwrap();
        total.max_rel_error = total.max_rel_error.max(r.max_rel_error);
        total.checked += r.checked;
        for (k, v) in r.per_tensor {
            let e = total.per_tensor.entry(k).or_insert(0.0);
            *e = e.max(v);
        }
    }
    total
}

pub struct ToggleResult {
    pub disabled_bit_exact: bool,
    /// Worst per-tensor `max|w' − w| / max|w|` after merge then unmerge.
    pub restore_rel_error: f64,
    /// Worst absolute output gap, merged and disabled vs unmerged and enabled.
    pub merged_gap: f64,
}

pub fn toggle_merge(net: &DenoiserNet, ad: &SparseAdapter, n: usize, seed: u64) -> ToggleResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = *net.config();
    let inputs: Vec<(Vec<f64>, usize, Vec<usize>)> = (0..n)
        .map(|_| {
            (
                (0..cfg.pixels()).map(|_| gauss(&mut rng)).collect(),
                rng.gen_range(0..cfg.timesteps),
                cond_tokens(rng.gen_range(0..4), rng.gen_range(0..4)),
            )
        })
        .collect();

    let mut off = ad.clone();
    off.set_enabled(false);
    let disabled_bit_exact =
        inputs.iter().all(|(x, t, c)| net.infer(x, *t, c, Some(&off), false).unwrap().0 == net.infer(x, *t, c, None, false).unwrap().0);

    let before: BTreeMap<String, Vec<f32>> = net.params().iter().map(|p| (p.layer_id.clone(), p.values.clone())).collect();
    let mut merged_net = net.clone();
    let mut m = ad.clone();
    merge(&mut merged_net, &mut m).unwrap();
    let mut merged_gap = 0.0f64;
    let mut m_off = m.clone();
    m_off.set_enabled(false);
    for (x, t, c) in &inputs {
        let a = merged_net.infer(x, *t, c, Some(&m_off), false).unwrap().0;
        let b = net.infer(x, *t, c, Some(ad), false).unwrap().0;
        merged_gap = a.iter().zip(&b).fold(merged_gap, |g, (u, v)| g.max((u - v).abs()));
    }
    unmerge(&mut merged_net, &mut m).unwrap();
    let mut restore = 0.0f64;
    for p in merged_net.params().iter() {
        let w = &before[&p.layer_id];
        let scale = w.iter().fold(0.0f64, |a, v| a.max(v.abs() as f64)).max(f64::MIN_POSITIVE);
        let err = p.values.iter().zip(w).fold(0.0f64, |a, (u, v)| a.max((*u as f64 - *v as f64).abs()));
        restore = restore.max(err / scale);
    }
    ToggleResult { disabled_bit_exact, restore_rel_error: restore, merged_gap }
}

pub struct StepZero {
    pub retain_term: f64,
    pub forget_term: f64,
    pub oracle_forget_term: f64,
}

/// First-step losses of a fresh adapter against a mean squared error of
/// two base forwards, one under each prompt.
pub fn step_zero(net: &DenoiserNet, data: &ConceptDataset, ow: &OverwriteSpec, sched: &NoiseSchedule, seed: u64) -> StepZero {
    let mut ad = AdapterConfig::default().attach(net, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let retain: Vec<&LabeledImage> = data.retain_set().into_iter().take(8).collect();
    let forget: Vec<&LabeledImage> = data.forget_set().into_iter().take(8).collect();
    let (r, f) = draw_items(&retain, &forget, ow, sched, true, &mut rng).unwrap();
    let l = distill_losses(net, &mut ad, &r, &f, 1.0).unwrap();
    let mut oracle = 0.0;
    for it in &f {
        let mut swapped = it.student_cond.clone();
        let pos = ow.forget.attribute.token_position();
        assert_eq!(swapped[pos], ow.forget.token());
        swapped[pos] = ow.overwrite.token();
        let a = net.infer(&it.x_t, it.t, &it.student_cond, None, false).unwrap().0;
        let b = net.infer(&it.x_t, it.t, &swapped, None, false).unwrap().0;
        oracle += a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64;
    }
    oracle /= f.len() as f64;
    StepZero { retain_term: l.retain_term, forget_term: l.forget_term, oracle_forget_term: oracle }
}

/// Largest `|ΔW|` over coordinates the mask switches off.
pub fn masked_out_max(ad: &SparseAdapter, mask: &BinaryMask) -> f64 {
    let mut worst = 0.0f64;
    for id in ad.layer_ids() {
        let d = ad.effective_delta(&id).unwrap();
        let bits = &mask.layers[&id].bits;
        for (v, &b) in d.data.iter().zip(bits) {
            if !b {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

/// Samples from `N(mu, 1)` in one dimension.
pub fn normal_rows(n: usize, mu: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| vec![mu + gauss(&mut rng)]).collect()
}
