//! TOML run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{DiTConfig, ModelSpec};
use crate::encoder_sim::SynthEncoderConfig;
use crate::error::{Error, Result};
use crate::flowmatch::{SamplerConfig, TrainConfig};
use crate::routing::{StrategyConfig, StrategyKind};

/// Everything a run needs; every section is optional in the file and
/// falls back to its defaults, but unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization.
    pub seed: u64,
    /// Default output directory when `--out` is not given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub encoder: SynthEncoderConfig,
    pub backbone: DiTConfig,
    pub strategy: StrategyConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl RunConfig {
    /// The gradient-check preset.
    pub fn tiny(kind: StrategyKind) -> Self {
        let spec = ModelSpec::tiny(kind);
        Self {
            encoder: spec.encoder,
            backbone: spec.backbone,
            strategy: spec.strategy,
            train: TrainConfig {
                batch_size: 3,
                ..TrainConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            encoder: self.encoder.clone(),
            backbone: self.backbone.clone(),
            strategy: self.strategy.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec().validate()?;
        self.train.validate()?;
        self.sampler.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        for cfg in [RunConfig::default(), RunConfig::tiny(StrategyKind::Joint)] {
            let text = cfg.to_toml().unwrap();
            let back = RunConfig::from_toml(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_toml().unwrap(), text);
        }
        let with_dir = RunConfig {
            output_dir: Some("runs/a".into()),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&with_dir.to_toml().unwrap()).unwrap(), with_dir);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[strategy]\nkind = \"bogus\"").is_err());
    }

    #[test]
    fn partial_files_use_defaults() {
        let cfg = RunConfig::from_toml("seed = 4\n[strategy]\nkind = \"time_wise\"\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.strategy.kind, StrategyKind::TimeWise);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nprompt_drop = 1.5").is_err());
        assert!(RunConfig::from_toml("[sampler]\nsteps = 0").is_err());
        assert!(RunConfig::from_toml("[backbone]\nheads = 5").is_err());
    }
}
