//! Compares backpropagated gradients with central finite differences on a
//! tiny network, with and without a masked adapter attached.
//!
//!     cargo run --release --example gradient_check

use anyhow::Result;
use fade::diffusion::data::cond_tokens;
use fade::substrate::{grad_check_report, DenoiserNet, GradCheckInput, NetConfig};
use fade::unlearn::AdapterConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> Result<()> {
    let cfg = NetConfig {
        image_size: 4,
        patch: 2,
        dim: 8,
        heads: 2,
        mlp_hidden: 8,
        timesteps: 10,
        vocab: 9,
        cond_len: 3,
        ..NetConfig::default()
    };
    let net = DenoiserNet::new(cfg, 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = GradCheckInput {
        x: (0..cfg.pixels()).map(|_| rng.sample(StandardNormal)).collect(),
        t: 4,
        cond: cond_tokens(2, 1),
        upstream: (0..cfg.pixels()).map(|_| rng.sample(StandardNormal)).collect(),
    };

    let mut ad = AdapterConfig { rank: 2, ..AdapterConfig::default() }.attach(&net, None)?;
    for (_, v) in ad.params_mut() {
        for x in v.iter_mut() {
            *x = 0.3 * rng.sample::<f32, _>(StandardNormal);
        }
    }

    for (label, adapter) in [("base", None), ("with adapter", Some(&ad))] {
        let r = grad_check_report(&net, &input, 1e-3, adapter)?;
        println!("{label}: {} entries, max relative error {:.2e}", r.checked, r.max_rel_error);
        let mut worst: Vec<(&String, &f64)> = r.per_tensor.iter().collect();
        worst.sort_by(|a, b| b.1.total_cmp(a.1));
        for (id, e) in worst.iter().take(3) {
            println!("  {id:<28} {e:.2e}");
        }
    }
    Ok(())
}
