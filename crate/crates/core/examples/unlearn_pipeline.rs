//! The whole experiment at reduced length: data, probe, base model,
//! unlearning of `square` in favour of `cross`, and evaluation.
//!
//! Pass `--full` for the default unlearning length (slower). A rerun into
//! the same directory reuses the trained base model.
//!
//!     cargo run --release --example unlearn_pipeline [--full] [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use fade::cli::{self, ExperimentConfig, Session};

const SMALL: &str = r#"
forget = "square"
overwrite = "cross"
[unlearn]
max_steps = 400
learning_rate = 5e-4
[eval]
n_per_cell = 5
[maps]
seeds = 2
"#;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full");
    let out = args.iter().find(|a| !a.starts_with("--")).map(PathBuf::from);
    let cfg = if full { ExperimentConfig::default() } else { ExperimentConfig::from_toml_str(SMALL)? };
    let root = out.unwrap_or_else(|| std::env::temp_dir().join("fade-unlearn-pipeline"));
    let s = Session::with_root(cfg, &root)?;

    let manifest = cli::cmd_gen_data(&s)?;
    println!("dataset {} ({} images)", manifest.fingerprint, manifest.images.len());
    // the base model is the slow part; reuse it when the directory has one
    if !s.layout.base_checkpoint().exists() {
        cli::cmd_train_base(&s)?;
    }
    let un = cli::cmd_unlearn(&s)?;
    match &un.mask {
        Some(m) => println!("mask density {:.3}", m.density()),
        None => println!("no mask"),
    }
    for p in &un.curve.points {
        println!("  step {:>5}: score_forget {:.3}, score_overwrite {:.3}", p.step, p.score_forget, p.score_overwrite);
    }

    for e in cli::cmd_eval(&s, &cli::default_models(&s.layout))? {
        let r = &e.report;
        println!("{:<8} UA {:6.2}  IRA {:6.2}  CRA {:6.2}  FID {:.3}", e.model, r.ua, r.ira, r.cra, r.fid_retain);
    }
    println!("outputs in {}", root.display());
    Ok(())
}
