//! Trains a small base denoiser from scratch and samples one image per
//! (shape, palette) cell.
//!
//!     cargo run --release --example train_denoiser [steps] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use fade::diffusion::data::{cond_tokens, IMAGE_SIZE, PALETTES, SHAPES};
use fade::diffusion::{sample_batch, train_base, Concept, ConceptDataset, DatasetSpec, SampleRequest};
use fade::imageio::{contact_sheet, upscale, write_pgm};
use fade::substrate::{save_checkpoint, NetConfig};
use fade::unlearn::TrainConfig;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(600);
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fade-train-denoiser"));
    std::fs::create_dir_all(&out)?;

    let data = ConceptDataset::generate(&DatasetSpec { per_cell: 60, ..DatasetSpec::default() }, Concept::parse("square")?)?;
    let net_cfg = NetConfig { timesteps: 30, beta_max: 0.3, ..NetConfig::default() };
    let sched = net_cfg.schedule()?;
    let cfg = TrainConfig { max_steps: steps, ..TrainConfig::base_default() };

    let res = train_base(&data, net_cfg, &sched, &cfg)?;
    let (first, last) = res.loss_ends(50);
    println!("{} parameters, loss {first:.4} -> {last:.4} over {steps} steps", res.net.num_params());
    save_checkpoint(&res.net, out.join("base.fdnt"))?;

    let requests: Vec<SampleRequest> = (0..SHAPES.len())
        .flat_map(|s| (0..PALETTES.len()).map(move |p| SampleRequest { cond: cond_tokens(s, p), seed: (s * 4 + p) as u64 }))
        .collect();
    let imgs = sample_batch(&res.net, None, &requests, &sched)?;
    let (w, h, px) = contact_sheet(&imgs, IMAGE_SIZE, PALETTES.len());
    let (w, h, px) = upscale(w, h, &px, 4);
    write_pgm(out.join("samples.pgm"), w, h, &px)?;
    println!("rows are {}, columns {}; written to {}", SHAPES.join("/"), PALETTES.join("/"), out.display());
    Ok(())
}
