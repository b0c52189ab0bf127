//! Run configuration: TOML file sections merged with command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use twinmae_core::model::ModelConfig;
use twinmae_core::probe::ProbeSpec;
use twinmae_core::train::{DataSpec, TrainConfig};

/// Scalar training settings, the `[train]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub workers: usize,
    pub precision: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            base_lr: t.base_lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
            workers: t.workers,
            precision: "f32".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainSection,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub probe: ProbeSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))?;
        if let Some(manifest) = &config.data.manifest {
            if manifest.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                config.data.manifest = Some(base.join(manifest));
            }
        }
        Ok(config)
    }

    pub fn train_config(&self, output_dir: PathBuf) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            batch_size: t.batch_size,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            seed: t.seed,
            data: self.data.clone(),
            model: self.model.clone(),
            output_dir,
            checkpoint_every: t.checkpoint_every,
            workers: t.workers,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_parse_and_unknown_keys_fail() {
        let cfg: RunConfig = toml::from_str(
            "[train]\nbatch_size = 4\n[model]\nmask_ratio = 0.5\n[model.decoder]\ndepth = 2\nwidth = 64\nheads = 2\n[data.scene]\nsprites = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.model.decoder.depth, 2);
        assert_eq!(cfg.data.scene.sprites, 5);
        assert_eq!(cfg.train.epochs, 40);
        assert!(toml::from_str::<RunConfig>("[train]\nbatchsize = 4\n").is_err());
    }
}
