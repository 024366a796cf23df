use std::path::PathBuf;
use std::process::ExitCode;
use std::time::SystemTime;

use anyhow::Context;
use clap::{Parser, Subcommand};
use fade::cli::{self, ExperimentConfig, ModelRef, Session, SweepAxis};
use fade::FadeError;

#[derive(Parser)]
#[command(name = "fade", version, about = "Concept unlearning experiments on a toy diffusion model")]
struct Args {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the fully expanded config.
    DumpConfig,
    /// Generate the toy dataset and its manifest.
    GenData,
    /// Train the probe classifier (if needed) and the base denoiser.
    TrainBase,
    /// Unlearn the forget concept with the configured mask.
    Unlearn,
    /// Evaluate models: `base`, an adapter file or a run directory.
    Eval {
        #[arg(long = "model")]
        models: Vec<String>,
    },
    /// Run one unlearning + evaluation per value along an axis.
    Sweep {
        /// q, overwrite, lr, lora_r, lora_alpha, lora_dropout or max_grad_norm
        #[arg(long)]
        axis: String,
        /// Comma separated; `all` on the overwrite axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Attention heatmaps, comparisons, and optionally a checkpoint series.
    Probe {
        #[arg(long = "model")]
        models: Vec<String>,
        /// Unlearning run directory whose checkpoints to map.
        #[arg(long)]
        series: Option<PathBuf>,
    },
    /// Overlap of the forget and overwrite saliency masks, or of two mask files.
    MaskStats {
        #[arg(long, num_args = 2, value_names = ["FORGET", "OTHER"])]
        masks: Option<Vec<PathBuf>>,
    },
}

fn models_or_default(s: &Session, names: &[String]) -> Vec<ModelRef> {
    if names.is_empty() {
        cli::default_models(&s.layout)
    } else {
        names.iter().map(|n| ModelRef::parse(n)).collect()
    }
}

fn run(s: &Session, command: &Command) -> anyhow::Result<()> {
    match command {
        Command::DumpConfig => print!("{}", s.cfg.to_toml_string()?),
        Command::GenData => {
            let m = cli::cmd_gen_data(s)?;
            println!("{} images, fingerprint {}", m.images.len(), m.fingerprint);
        }
        Command::TrainBase => {
            let p = cli::cmd_train_base(s)?;
            println!("base checkpoint {}", p.display());
        }
        Command::Unlearn => {
            let o = cli::cmd_unlearn(s)?;
            let last = o.result.curve.last();
            println!(
                "adapter in {} ({} steps, final loss {:.6})",
                o.dir.display(),
                o.result.curve.len(),
                last.map(|r| r.total).unwrap_or(0.0)
            );
        }
        Command::Eval { models } => {
            for e in cli::cmd_eval(s, &models_or_default(s, models))? {
                let r = &e.report;
                println!("{:<12} UA {:6.2}  IRA {:6.2}  CRA {:6.2}  FID {:8.3}", e.model, r.ua, r.ira, r.cra, r.fid_retain);
            }
        }
        Command::Sweep { axis, values } => {
            let out = cli::cmd_sweep(s, SweepAxis::parse(axis)?, values)?;
            for r in &out.rows {
                match (&r.report, &r.error) {
                    (Some(m), _) => println!("{}={:<10} UA {:6.2}  IRA {:6.2}  CRA {:6.2}", out.axis, r.value, m.ua, m.ira, m.cra),
                    (None, e) => println!("{}={:<10} failed: {}", out.axis, r.value, e.as_deref().unwrap_or("")),
                }
            }
        }
        Command::Probe { models, series } => {
            let out = cli::cmd_probe(s, &models_or_default(s, models), series.as_deref())?;
            for t in &out.trend {
                println!(
                    "{}: l1 to base overwrite map {:.6}, to base forget map {:.6}",
                    t.model, t.l1_to_base_overwrite, t.l1_to_base_forget
                );
            }
        }
        Command::MaskStats { masks } => {
            let pair = masks.as_ref().map(|m| (m[0].as_path(), m[1].as_path()));
            let st = cli::cmd_mask_stats(s, pair)?;
            println!("jaccard {:.4}, forget-in-overwrite {:.4}", st.overlap.jaccard, st.overlap.frac_f_in_o);
        }
    }
    Ok(())
}

fn code_of(e: &anyhow::Error) -> u8 {
    e.chain().find_map(|c| c.downcast_ref::<FadeError>()).map(cli::exit_code).unwrap_or(1) as u8
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::DumpConfig => "dump-config",
        Command::GenData => "gen-data",
        Command::TrainBase => "train-base",
        Command::Unlearn => "unlearn",
        Command::Eval { .. } => "eval",
        Command::Sweep { .. } => "sweep",
        Command::Probe { .. } => "probe",
        Command::MaskStats { .. } => "mask-stats",
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let session = args
        .config
        .as_ref()
        .map(|p| ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display())))
        .unwrap_or_else(|| Ok(ExperimentConfig::default()))
        .and_then(|cfg| Ok(Session::new(cfg)?));
    let s = match session {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(code_of(&e));
        }
    };
    let started = SystemTime::now();
    let result = run(&s, &args.command);
    let name = command_name(&args.command);
    if !matches!(args.command, Command::DumpConfig) {
        let status = if result.is_ok() { "ok" } else { "error" };
        if let Err(e) = cli::log_run(&s.layout, name, started, status) {
            eprintln!("warning: could not write run log: {e}");
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code_of(&e))
        }
    }
}
