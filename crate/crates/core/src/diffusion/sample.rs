//! Ancestral DDPM sampling with a clipped `x0` estimate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::data::from_model_space;
use super::schedule::NoiseSchedule;
use crate::adapter::SparseAdapter;
use crate::error::{input_err, Result};
use crate::substrate::{AttentionRecord, DenoiserNet, ResolvedNet, Sample};

/// One image to generate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRequest {
    pub cond: Vec<usize>,
    pub seed: u64,
}

fn check(net: &DenoiserNet, cond: &[usize], sched: &NoiseSchedule) -> Result<()> {
    if *sched != net.config().schedule()? {
        return input_err(format!(
            "sampling schedule ({} steps) differs from the network's schedule ({} steps)",
            sched.steps(),
            net.config().timesteps
        ));
    }
    let zeros = vec![0.0; net.config().pixels()];
    net.validate_sample(&Sample { x: &zeros, t: 0, cond })
}

/// Runs the reverse chain on an already resolved network.
pub fn run_chain(r: &ResolvedNet, cond: &[usize], sched: &NoiseSchedule, seed: u64, capture: bool) -> (Vec<f32>, Vec<AttentionRecord>) {
    let mut records = Vec::new();
    let img = ancestral(r.config().pixels(), sched, seed, |x, t| {
        let (eps, recs) = r.infer(x, t, cond, capture);
        records.extend(recs);
        eps
    });
    (img, records)
}

/// The reverse chain for an arbitrary noise predictor, starting from seeded
/// standard normal noise.
pub fn ancestral(n: usize, sched: &NoiseSchedule, seed: u64, mut predict: impl FnMut(&[f64], usize) -> Vec<f64>) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for t in (0..sched.steps()).rev() {
        let eps = predict(&x, t);
        let ab = sched.alpha_bar[t];
        let ab_prev = sched.alpha_bar_prev(t);
        let beta = sched.beta[t];
        let c1 = ab_prev.sqrt() * beta / (1.0 - ab);
        let c2 = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
        for i in 0..n {
            let x0 = ((x[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt()).clamp(-1.0, 1.0);
            x[i] = c1 * x0 + c2 * x[i];
        }
        if t > 0 {
            for xi in x.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *xi += sigma * z;
            }
        }
    }
    from_model_space(&x)
}

/// Generates one image in `[0, 1]`, deterministic in `seed`.
pub fn sample(net: &DenoiserNet, adapter: Option<&SparseAdapter>, cond: &[usize], sched: &NoiseSchedule, seed: u64) -> Result<Vec<f32>> {
    Ok(sample_with_capture(net, adapter, cond, sched, seed, false)?.0)
}

/// Like [`sample`], additionally returning the cross-attention records of
/// every denoising step when `capture` is set.
pub fn sample_with_capture(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    cond: &[usize],
    sched: &NoiseSchedule,
    seed: u64,
    capture: bool,
) -> Result<(Vec<f32>, Vec<AttentionRecord>)> {
    check(net, cond, sched)?;
    let r = net.resolve(adapter, false)?;
    Ok(run_chain(&r, cond, sched, seed, capture))
}

/// Generates many images in parallel. Output order follows `requests`.
pub fn sample_batch(
    net: &DenoiserNet,
    adapter: Option<&SparseAdapter>,
    requests: &[SampleRequest],
    sched: &NoiseSchedule,
) -> Result<Vec<Vec<f32>>> {
    for q in requests {
        check(net, &q.cond, sched)?;
    }
    let r = net.resolve(adapter, false)?;
    Ok(requests.par_iter().map(|q| run_chain(&r, &q.cond, sched, q.seed, false).0).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::cond_tokens;
    use crate::substrate::NetConfig;

    fn small_net() -> DenoiserNet {
        let cfg = NetConfig { timesteps: 10, ..NetConfig::default() };
        DenoiserNet::new(cfg, 3).unwrap()
    }

    #[test]
    fn deterministic_per_seed() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let c = cond_tokens(1, 2);
        let a = sample(&net, None, &c, &s, 5).unwrap();
        let b = sample(&net, None, &c, &s, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample(&net, None, &c, &s, 6).unwrap());
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_prediction_follows_closed_form_recursion() {
        let s = small_net().config().schedule().unwrap();
        let got = ancestral(256, &s, 11, |x, _| vec![0.0; x.len()]);

        // independent scalar recursion with eps_hat = 0
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut x: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        for t in (0..10).rev() {
            let ab = s.alpha_bar[t];
            let abp = if t == 0 { 1.0 } else { s.alpha_bar[t - 1] };
            let b = s.beta[t];
            for v in x.iter_mut() {
                let x0 = (*v / ab.sqrt()).clamp(-1.0, 1.0);
                *v = abp.sqrt() * b / (1.0 - ab) * x0 + (1.0 - b).sqrt() * (1.0 - abp) / (1.0 - ab) * *v;
            }
            if t > 0 {
                let sig = (b * (1.0 - abp) / (1.0 - ab)).sqrt();
                for v in x.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += sig * z;
                }
            }
        }
        let expect: Vec<f32> = x.iter().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0) as f32).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn capture_does_not_perturb_the_image() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let c = cond_tokens(3, 1);
        let (a, recs) = sample_with_capture(&net, None, &c, &s, 9, true).unwrap();
        let (b, none) = sample_with_capture(&net, None, &c, &s, 9, false).unwrap();
        assert_eq!(a, b);
        assert!(none.is_empty());
        assert_eq!(recs.len(), 10 * net.config().heads);
    }

    #[test]
    fn batch_matches_single() {
        let net = small_net();
        let s = net.config().schedule().unwrap();
        let reqs: Vec<SampleRequest> = (0..3).map(|i| SampleRequest { cond: cond_tokens(i, i), seed: i as u64 }).collect();
        let batch = sample_batch(&net, None, &reqs, &s).unwrap();
        for (q, img) in reqs.iter().zip(&batch) {
            assert_eq!(&sample(&net, None, &q.cond, &s, q.seed).unwrap(), img);
        }
    }

    #[test]
    fn rejects_mismatched_schedule() {
        let net = small_net();
        let s = crate::diffusion::make_schedule(20, 1e-3, 0.2).unwrap();
        assert!(sample(&net, None, &cond_tokens(0, 0), &s, 0).is_err());
        let s = crate::diffusion::make_schedule(10, 1e-3, 0.3).unwrap();
        assert!(sample(&net, None, &cond_tokens(0, 0), &s, 0).is_err());
    }
}
