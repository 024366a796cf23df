//! Experiment configuration: one TOML file per experiment, every field
//! optional, defaults embedded.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::data::{Concept, DatasetSpec};
use crate::diffusion::NoiseSchedule;
use crate::error::{FadeError, Result};
use crate::eval::{EvalSpec, ProbeConfig};
use crate::saliency::BlockSpec;
use crate::substrate::NetConfig;
use crate::unlearn::{AdapterConfig, OverwriteSpec, TrainConfig};

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "FADE_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    #[default]
    None,
    PerWeight,
    PerBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// One block per output row of each weight matrix.
    #[default]
    Row,
    /// One block per tensor.
    Layer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub mode: MaskMode,
    /// Fraction of weights (or blocks) kept.
    pub q: Option<f64>,
    /// Saliency threshold, per-weight mode only.
    pub gamma: Option<f64>,
    pub blocks: BlockKind,
    pub saliency_batches: usize,
    pub saliency_batch_size: usize,
    pub saliency_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mode: MaskMode::None,
            q: None,
            gamma: None,
            blocks: BlockKind::Row,
            saliency_batches: 8,
            saliency_batch_size: 16,
            saliency_seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn block_spec(&self) -> BlockSpec {
        match self.blocks {
            BlockKind::Row => BlockSpec::PerRow,
            BlockKind::Layer => BlockSpec::PerLayer,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FadeError::Config(format!("mask: {m}")));
        if let Some(q) = self.q {
            if !(0.0..=1.0).contains(&q) {
                return bad(&format!("q must lie in [0, 1], got {q}"));
            }
        }
        if let Some(g) = self.gamma {
            if !(g >= 0.0) {
                return bad(&format!("gamma must be nonnegative, got {g}"));
            }
        }
        match self.mode {
            MaskMode::None => Ok(()),
            MaskMode::PerWeight => match (self.q, self.gamma) {
                (Some(_), None) | (None, Some(_)) => Ok(()),
                _ => bad("per-weight mode needs exactly one of q and gamma"),
            },
            MaskMode::PerBlock => match (self.q, self.gamma) {
                (Some(_), None) => Ok(()),
                _ => bad("per-block mode needs q and no gamma"),
            },
        }?;
        if self.mode != MaskMode::None && (self.saliency_batches == 0 || self.saliency_batch_size == 0) {
            return bad("saliency_batches and saliency_batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Attention-map probing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapsConfig {
    /// Sampling seeds per prompted cell.
    pub seeds: usize,
    pub first_seed: u64,
    /// Upscaling factor for exported heatmaps.
    pub scale: usize,
}

impl Default for MapsConfig {
    fn default() -> Self {
        Self { seeds: 12, first_seed: 0, scale: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Maximum number of sweep entries run at once.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { workers: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub forget: String,
    pub overwrite: String,
    pub dataset: DatasetSpec,
    pub net: NetConfig,
    /// Base denoiser training. Fields left out take the base-training
    /// defaults, not the unlearning ones.
    pub base: TrainConfig,
    pub probe: ProbeConfig,
    pub unlearn: TrainConfig,
    pub adapter: AdapterConfig,
    pub mask: MaskConfig,
    pub eval: EvalSpec,
    pub maps: MapsConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("fade-out"),
            forget: "square".into(),
            overwrite: "cross".into(),
            dataset: DatasetSpec::default(),
            net: NetConfig::default(),
            base: TrainConfig::base_default(),
            probe: ProbeConfig::default(),
            unlearn: TrainConfig::default(),
            adapter: AdapterConfig::default(),
            mask: MaskConfig::default(),
            eval: EvalSpec::default(),
            maps: MapsConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> FadeError {
    FadeError::Config(e.to_string())
}

/// Re-labels any validation failure as a configuration error.
fn as_config<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        FadeError::Config(_) => e,
        other => FadeError::Config(other.to_string()),
    })
}

impl ExperimentConfig {
    /// Parses and validates. A partial `[base]` table is completed from the
    /// base-training defaults.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(config_err)?;
        if let Some(toml::Value::Table(base)) = table.get_mut("base") {
            let defaults = toml::Table::try_from(TrainConfig::base_default()).map_err(config_err)?;
            for (k, v) in defaults {
                base.entry(k).or_insert(v);
            }
        }
        let cfg: Self = table.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FadeError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Every field written out, defaults included.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FadeError::Format(e.to_string()))
    }

    /// Short digest of the fully expanded configuration.
    pub fn hash(&self) -> Result<String> {
        let text = self.to_toml_string()?;
        Ok(hex::encode(&Sha256::digest(text.as_bytes())[..8]))
    }

    pub fn validate(&self) -> Result<()> {
        as_config(self.overwrite_spec())?;
        as_config(self.net.validate())?;
        as_config(self.base.validate())?;
        as_config(self.unlearn.validate())?;
        as_config(self.eval.validate())?;
        self.mask.validate()?;
        if self.dataset.per_cell == 0 {
            return Err(FadeError::Config("dataset.per_cell must be at least 1".into()));
        }
        if self.adapter.rank == 0 {
            return Err(FadeError::Config("adapter.rank must be at least 1".into()));
        }
        if self.maps.seeds == 0 {
            return Err(FadeError::Config("maps.seeds must be at least 1".into()));
        }
        if self.sweep.workers == 0 {
            return Err(FadeError::Config("sweep.workers must be at least 1".into()));
        }
        Ok(())
    }

    pub fn forget_concept(&self) -> Result<Concept> {
        as_config(Concept::parse(&self.forget))
    }

    pub fn overwrite_concept(&self) -> Result<Concept> {
        as_config(Concept::parse(&self.overwrite))
    }

    pub fn overwrite_spec(&self) -> Result<OverwriteSpec> {
        as_config(OverwriteSpec::new(self.forget_concept()?, self.overwrite_concept()?))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        as_config(self.net.schedule())
    }

    /// The output directory after applying the environment override.
    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}
