//! Cross-attention heatmaps of the shape token under two prompts, and how
//! far apart they are.
//!
//!     cargo run --release --example attention_maps [base.fdnt] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use fade::cli::{capture_prompt, MapsConfig};
use fade::diffusion::{train_base, Concept, ConceptDataset, DatasetSpec};
use fade::probe::{aggregate, compare_maps, per_timestep_maps, strip_pgm};
use fade::substrate::{load_checkpoint, NetConfig};
use fade::unlearn::TrainConfig;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next();
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fade-attention-maps"));
    std::fs::create_dir_all(&out)?;

    let forget = Concept::parse("square")?;
    let overwrite = Concept::parse("cross")?;
    let net = match ckpt {
        Some(path) => load_checkpoint(path)?,
        None => {
            let data = ConceptDataset::generate(&DatasetSpec { per_cell: 60, ..DatasetSpec::default() }, forget)?;
            let cfg = NetConfig { timesteps: 30, beta_max: 0.3, ..NetConfig::default() };
            train_base(&data, cfg, &cfg.schedule()?, &TrainConfig { max_steps: 400, ..TrainConfig::base_default() })?.net
        }
    };
    let sched = net.config().schedule()?;
    let maps_cfg = MapsConfig { seeds: 4, ..MapsConfig::default() };
    let token = forget.attribute.token_position();

    let mut maps = Vec::new();
    for prompt in [forget, overwrite] {
        let records = capture_prompt(&net, None, prompt, &sched, &maps_cfg)?;
        let map = aggregate(&records, token)?;
        map.write(&out, prompt.name())?;
        let steps = per_timestep_maps(&records, token)?;
        std::fs::write(out.join(format!("{}_strip.pgm", prompt.name())), strip_pgm(&steps, maps_cfg.scale)?)?;
        println!("{}: {} records, mean attention {:.4}", prompt.name(), records.len(), map.mean());
        maps.push(map);
    }
    let (l1, cos) = compare_maps(&maps[0], &maps[1])?;
    println!("{} vs {}: l1 {l1:.4}, cosine {cos:.4}", forget.name(), overwrite.name());
    println!("maps in {}", out.display());
    Ok(())
}
