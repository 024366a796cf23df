//! Attaches a masked low-rank adapter, then shows that toggling it off
//! restores the base outputs and that merging folds it into the weights.
//!
//!     cargo run --release --example adapter_merge

use anyhow::Result;
use fade::adapter::{load_adapter, merge, save_adapter, unmerge};
use fade::diffusion::data::cond_tokens;
use fade::saliency::{BinaryMask, Granularity, LayerMask, Selector};
use fade::substrate::{DenoiserNet, NetConfig, ADAPTER_TARGETS};
use fade::unlearn::AdapterConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn main() -> Result<()> {
    let net = DenoiserNet::new(NetConfig::default(), 0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    // keep a random half of each target matrix trainable
    let layers = ADAPTER_TARGETS
        .iter()
        .map(|&id| {
            let (o, i) = net.weight_dims(id).expect("adapter target");
            (id.to_string(), LayerMask { shape: vec![o, i], bits: (0..o * i).map(|_| rng.gen_bool(0.5)).collect() })
        })
        .collect();
    let mask = BinaryMask { layers, granularity: Granularity::PerWeight, selector: Selector::Q(0.5), fingerprint: String::new() };

    let mut ad = AdapterConfig::default().attach(&net, Some(&mask))?;
    println!("{} adapter parameters on {} layers", ad.param_count(), ad.layer_ids().len());
    // a fresh adapter has B = 0; give it something to do
    for (_, v) in ad.params_mut() {
        for x in v.iter_mut() {
            *x = rng.gen_range(-0.05..0.05);
        }
    }

    let x: Vec<f64> = (0..net.config().pixels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cond = cond_tokens(1, 2);
    let base = net.infer(&x, 10, &cond, None, false)?.0;
    let with = net.infer(&x, 10, &cond, Some(&ad), false)?.0;
    let mut off = ad.clone();
    off.set_enabled(false);
    let disabled = net.infer(&x, 10, &cond, Some(&off), false)?.0;
    println!("adapter on changes the output by up to {:.3e}", max_gap(&base, &with));
    println!("adapter off matches the base exactly: {}", base == disabled);

    let mut merged = net.clone();
    merge(&mut merged, &mut ad)?;
    let folded = merged.infer(&x, 10, &cond, None, false)?.0;
    println!("merged weights reproduce the adapter output to {:.3e}", max_gap(&folded, &with));
    unmerge(&mut merged, &mut ad)?;
    let restored = merged.infer(&x, 10, &cond, None, false)?.0;
    println!("after unmerge the base output is back to {:.3e}", max_gap(&restored, &base));

    let path = std::env::temp_dir().join("fade-adapter-merge.fade");
    save_adapter(&ad, &path)?;
    let back = load_adapter(&path)?;
    println!("saved and reloaded {} ({} parameters)", path.display(), back.param_count());
    Ok(())
}
