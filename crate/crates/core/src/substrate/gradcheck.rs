//! Central finite-difference verification of the analytic gradients.

use std::collections::BTreeMap;

use crate::adapter::{lora_a_key, lora_b_key, SparseAdapter};
use crate::error::{input_err, Result};

use super::net::DenoiserNet;

/// One forward input plus the upstream gradient defining `L = Σ upstream · eps_hat`.
#[derive(Debug, Clone)]
pub struct GradCheckInput {
    pub x: Vec<f64>,
    pub t: usize,
    pub cond: Vec<usize>,
    pub upstream: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor (adapter factors included).
    pub per_tensor: BTreeMap<String, f64>,
    pub checked: usize,
}

const MAX_PARAMS: usize = 100_000;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn loss(net: &DenoiserNet, input: &GradCheckInput, adapter: Option<&SparseAdapter>) -> Result<f64> {
    let (y, _) = net.infer(&input.x, input.t, &input.cond, adapter, false)?;
    Ok(y.iter().zip(&input.upstream).map(|(a, b)| a * b).sum())
}

/// Location of one stored 32-bit value.
enum Slot<'s> {
    Param(&'s str, usize),
    A(&'s str, usize),
    B(&'s str, usize),
}

fn slot_mut<'a>(slot: &Slot, net: &'a mut DenoiserNet, ad: &'a mut Option<SparseAdapter>) -> &'a mut f32 {
    match *slot {
        Slot::Param(id, i) => &mut net.params_mut().get_mut(id).expect("param").values[i],
        Slot::A(id, i) => &mut ad.as_mut().and_then(|a| a.layer_mut(id)).expect("adapter layer").a[i],
        Slot::B(id, i) => &mut ad.as_mut().and_then(|a| a.layer_mut(id)).expect("adapter layer").b[i],
    }
}

/// Perturbs one stored 32-bit value by ±h and returns the central difference,
/// dividing by the step that was actually representable.
fn central_difference(
    slot: Slot,
    net: &mut DenoiserNet,
    adapter: &mut Option<SparseAdapter>,
    input: &GradCheckInput,
    h: f64,
) -> Result<f64> {
    let orig = *slot_mut(&slot, net, adapter);
    let up = (orig as f64 + h) as f32;
    let down = (orig as f64 - h) as f32;
    *slot_mut(&slot, net, adapter) = up;
    let lp = loss(net, input, adapter.as_ref())?;
    *slot_mut(&slot, net, adapter) = down;
    let lm = loss(net, input, adapter.as_ref())?;
    *slot_mut(&slot, net, adapter) = orig;
    Ok((lp - lm) / (up as f64 - down as f64))
}

pub fn grad_check_report(net: &DenoiserNet, input: &GradCheckInput, h: f64, adapter: Option<&SparseAdapter>) -> Result<GradCheckReport> {
    if !(h > 0.0) || !h.is_finite() {
        return input_err(format!("finite-difference step must be positive, got {h}"));
    }
    let total = net.num_params() + adapter.map_or(0, |a| a.param_count());
    if total >= MAX_PARAMS {
        return input_err(format!("{total} parameters is too many to enumerate"));
    }
    if input.upstream.len() != net.config().pixels() {
        return input_err("upstream gradient shape does not match the image");
    }
    let mut work = net.clone();
    let mut ad = adapter.cloned();
    work.forward(&input.x, input.t, &input.cond, ad.as_ref(), false)?;
    let grads = work.backward(&input.upstream)?;
    work.clear_tape();

    let mut report = GradCheckReport::default();
    let ids: Vec<(String, usize, bool)> = work.params().iter().map(|p| (p.layer_id.clone(), p.len(), p.requires_grad)).collect();
    for (id, len, trainable) in ids {
        if !trainable {
            continue;
        }
        let g = grads.get(&id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let mut worst = 0.0f64;
        for i in 0..len {
            let num = central_difference(Slot::Param(&id, i), &mut work, &mut ad, input, h)?;
            worst = worst.max(rel_error(g[i], num));
            report.checked += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.insert(id, worst);
    }

    if let Some(adapter) = adapter {
        for l in adapter.layers() {
            for (key, is_a) in [(lora_a_key(&l.layer_id), true), (lora_b_key(&l.layer_id), false)] {
                let len = if is_a { l.a.len() } else { l.b.len() };
                let g = grads.get(&key).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; len]);
                let mut worst = 0.0f64;
                for i in 0..len {
                    let lid = l.layer_id.as_str();
                    let num = central_difference(if is_a { Slot::A(lid, i) } else { Slot::B(lid, i) }, &mut work, &mut ad, input, h)?;
                    worst = worst.max(rel_error(g[i], num));
                    report.checked += 1;
                }
                report.max_rel_error = report.max_rel_error.max(worst);
                report.per_tensor.insert(key, worst);
            }
        }
    }
    Ok(report)
}

/// Max over parameters of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check(net: &DenoiserNet, input: &GradCheckInput, h: f64) -> Result<f64> {
    Ok(grad_check_report(net, input, h, None)?.max_rel_error)
}
