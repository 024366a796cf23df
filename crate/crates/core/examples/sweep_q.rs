//! Unlearns once per mask fraction Q and tabulates the metrics, with
//! shortened unlearning runs. Other axes work the same way (`lr`, `lora_r`,
//! `overwrite`, ...). Pointing it at the `unlearn_pipeline` output reuses
//! that base model.
//!
//!     cargo run --release --example sweep_q [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use fade::cli::{self, ExperimentConfig, Session, SweepAxis};

const SHORT: &str = r#"
[unlearn]
max_steps = 300
learning_rate = 5e-4
[eval]
n_per_cell = 5
"#;

fn main() -> Result<()> {
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fade-unlearn-pipeline"));
    let s = Session::with_root(ExperimentConfig::from_toml_str(SHORT)?, &root)?;
    if !s.layout.base_checkpoint().exists() {
        cli::cmd_gen_data(&s)?;
        cli::cmd_train_base(&s)?;
    }

    let values: Vec<String> = ["0.01", "0.1", "0.5", "1.0"].iter().map(|v| v.to_string()).collect();
    let out = cli::cmd_sweep(&s, SweepAxis::Q, &values)?;
    println!("base: UA {:.2}  IRA {:.2}  CRA {:.2}", out.base.ua, out.base.ira, out.base.cra);
    for row in &out.rows {
        match &row.report {
            Some(r) => println!(
                "Q={:<5} density {:.3}  UA {:6.2}  IRA {:6.2}  CRA {:6.2}  crossing {:?}",
                row.value,
                row.mask_density.unwrap_or(1.0),
                r.ua,
                r.ira,
                r.cra,
                row.crossing
            ),
            None => println!("Q={:<5} failed: {}", row.value, row.error.as_deref().unwrap_or("")),
        }
    }
    println!("table in {}", root.join("sweep/q/sweep.csv").display());
    Ok(())
}
