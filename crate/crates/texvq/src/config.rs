//! TOML run configuration and command-line overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use texvq_core::dataset::DatasetConfig;
use texvq_core::degradation::RecipeRanges;
use texvq_core::training::{TrainConfig, Variant};

use crate::formats::{json_hash, ConfigHash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub codebook_sizes: Vec<usize>,
    /// Side of the square latent grid matched per repetition.
    pub grid: usize,
    pub k: usize,
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { codebook_sizes: vec![64, 128, 256, 512, 1024], grid: 4, k: 3, repetitions: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Candidate counts reported by `hit-rate` when `--k` is absent.
    pub hit_rate_k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { hit_rate_k: vec![1, 3, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
    pub eval: EvalConfig,
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scale: Option<usize>,
    pub variant: Option<Variant>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// File config (or defaults) with overrides applied, then validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> anyhow::Result<Self> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
            cfg.data.seed = seed;
        }
        if let Some(scale) = overrides.scale {
            if !matches!(scale, 2 | 4) {
                bail!("--scale must be 2 or 4, got {scale}");
            }
            cfg.train.model.scale = scale;
            cfg.data.ranges = RecipeRanges { scale, ..cfg.data.ranges.clone() };
        }
        if let Some(v) = overrides.variant {
            cfg.train.variant = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate()?;
        if self.data.ranges.scale != self.train.model.scale {
            bail!("data scale {} differs from model scale {}", self.data.ranges.scale, self.train.model.scale);
        }
        if self.data.size != self.train.patch_size {
            bail!("data size {} differs from patch size {}", self.data.size, self.train.patch_size);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises to TOML")
    }

    /// Identifies the tensor layout a checkpoint was trained with. Step
    /// budgets, learning rates and the stage-2 variant are excluded so that
    /// later phases can load earlier checkpoints.
    pub fn architecture_hash(&self) -> ConfigHash {
        json_hash(&(&self.train.model, self.train.patch_size))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_keep_hash_for_variants() {
        let base = RunConfig::resolve(None, &Overrides::default()).unwrap();
        let full =
            RunConfig::resolve(None, &Overrides { variant: Some(Variant::Baseline), ..Overrides::default() }).unwrap();
        assert_eq!(base.architecture_hash(), full.architecture_hash());
        let four = RunConfig::resolve(None, &Overrides { scale: Some(4), ..Overrides::default() }).unwrap();
        assert_eq!(four.data.ranges.scale, 4);
        assert_ne!(four.architecture_hash(), base.architecture_hash());
        assert!(RunConfig::resolve(None, &Overrides { scale: Some(3), ..Overrides::default() }).is_err());
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg: RunConfig = toml::from_str("[train]\nstage1_steps = 7\n").unwrap();
        assert_eq!(cfg.train.stage1_steps, 7);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }
}
