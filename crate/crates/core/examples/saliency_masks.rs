//! Gradient saliency on the forget set, the masks it induces, and how much
//! they overlap with the masks of the overwrite concept.
//!
//!     cargo run --release --example saliency_masks [base.fdnt]

use anyhow::Result;
use fade::diffusion::{train_base, Concept, ConceptDataset, DatasetSpec};
use fade::saliency::{block_mask, compute_saliency, mask_overlap, spearman, threshold_mask, topq_mask, BlockSpec};
use fade::substrate::{load_checkpoint, NetConfig, ADAPTER_TARGETS};
use fade::unlearn::TrainConfig;

fn main() -> Result<()> {
    let forget = Concept::parse("square")?;
    let overwrite = Concept::parse("cross")?;
    let data = ConceptDataset::generate(&DatasetSpec { per_cell: 60, ..DatasetSpec::default() }, forget)?;
    let net = match std::env::args().nth(1) {
        Some(path) => load_checkpoint(path)?,
        None => {
            let cfg = NetConfig { timesteps: 30, beta_max: 0.3, ..NetConfig::default() };
            train_base(&data, cfg, &cfg.schedule()?, &TrainConfig { max_steps: 300, ..TrainConfig::base_default() })?.net
        }
    };
    let sched = net.config().schedule()?;

    let sal_f = compute_saliency(&net, &data.forget_set(), &sched, &ADAPTER_TARGETS, 8, 16, 0)?;
    let sal_o = compute_saliency(&net, &data.of_concept(overwrite), &sched, &ADAPTER_TARGETS, 8, 16, 0)?;
    println!("{} salient coordinates, max {:.3e}", sal_f.total_len(), sal_f.max());
    println!("rank correlation forget vs overwrite: {:.3}", spearman(&sal_f.flat(), &sal_o.flat()));

    for q in [0.01, 0.1, 0.5] {
        let mf = topq_mask(&sal_f, q)?;
        let mo = topq_mask(&sal_o, q)?;
        let ov = mask_overlap(&mf, &mo)?;
        let rows = block_mask(&sal_f, q, &BlockSpec::PerRow)?;
        println!(
            "Q={q:<4} density {:.4}, jaccard {:.3}, forget-in-overwrite {:.3}, per-row density {:.4}",
            mf.density(),
            ov.jaccard,
            ov.frac_f_in_o,
            rows.density()
        );
    }

    let gamma = 0.5 * sal_f.max();
    println!("threshold at half the max keeps {} coordinates", threshold_mask(&sal_f, gamma)?.ones());
    Ok(())
}
