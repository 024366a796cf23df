//! Generates the shapes-and-palettes dataset and writes one contact sheet
//! per split.
//!
//!     cargo run --release --example toy_dataset [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use fade::diffusion::data::{IMAGE_SIZE, PALETTES, SHAPES};
use fade::diffusion::{Concept, ConceptDataset, DatasetSpec, Split};
use fade::imageio::{contact_sheet, upscale, write_pgm};

fn main() -> Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fade-toy-dataset"));
    std::fs::create_dir_all(&out)?;

    let forget = Concept::parse("square")?;
    let data = ConceptDataset::generate(&DatasetSpec::default(), forget)?;
    println!("{} images, fingerprint {}", data.len(), data.fingerprint());
    for (s, shape) in SHAPES.iter().enumerate() {
        let counts: Vec<String> = (0..PALETTES.len()).map(|p| data.cell_count(s, p).to_string()).collect();
        println!("  {shape:<9} {}", counts.join(" "));
    }

    for split in [Split::Forget, Split::Retain] {
        let idx = data.indices(split);
        println!("{split:?}: {} images", idx.len());
        let imgs: Vec<Vec<f32>> = idx.iter().take(64).map(|&i| data.images[i].pixels.clone()).collect();
        let (w, h, px) = contact_sheet(&imgs, IMAGE_SIZE, 8);
        let (w, h, px) = upscale(w, h, &px, 4);
        let path = out.join(format!("{split:?}.pgm").to_lowercase());
        write_pgm(&path, w, h, &px)?;
        println!("  sheet {}", path.display());
    }
    Ok(())
}
