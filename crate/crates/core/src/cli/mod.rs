//! Config-driven experiment commands behind the `fade` binary.
//!
//! Output layout under the output root:
//!
//! ```text
//! data/        dataset manifest and images
//! probe/       probe classifier and its held-out report
//! base/        base checkpoint and per-step losses
//! unlearn/     adapter, checkpoints, losses, mask, alignment curve
//! eval/<model> metrics and sample sheets, plus eval/summary.csv
//! maps/        attention heatmaps, comparisons, checkpoint series
//! sweep/<axis> one directory per value and sweep.csv
//! mask_stats/  forget/overwrite mask overlap
//! run_log.jsonl
//! ```

pub mod commands;
pub mod config;
pub mod maps;
pub mod sweep;

pub use commands::{
    build_mask, cmd_eval, cmd_gen_data, cmd_mask_stats, cmd_train_base, cmd_unlearn, default_models, exit_code, log_run, EvalSummary,
    Layout, MaskStats, ModelRef, RunManifest, Session, UnlearnOutcome, TOOL_VERSION,
};
pub use config::{BlockKind, ExperimentConfig, MapsConfig, MaskConfig, MaskMode, SweepConfig, OUTPUT_ROOT_ENV};
pub use maps::{capture_prompt, cmd_probe, CompareRow, MapSet, ProbeOutcome, TrendRow};
pub use sweep::{cmd_sweep, SweepAxis, SweepOutcome, SweepRow};
