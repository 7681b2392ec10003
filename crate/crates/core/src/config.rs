//! Run configuration, read from TOML. Every section is optional and falls
//! back to the toy-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::LossWeights;
use crate::modnet::ModNetConfig;
use crate::pipeline::{SamplerConfig, TrainingConfig};
use crate::probe::ProbeConfig;
use crate::sketch::{SketchEncoderConfig, DEFAULT_MASK_THRESHOLD};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "SKETCHMOD_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub threshold: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            threshold: DEFAULT_MASK_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    pub encoder: SketchEncoderConfig,
    pub modnet: ModNetConfig,
    pub probe: ProbeConfig,
    pub masks: MaskConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub loss: LossWeights,
    pub execution: Execution,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: BackboneConfig::default(),
            encoder: SketchEncoderConfig::default(),
            modnet: ModNetConfig::toy(),
            probe: ProbeConfig::default(),
            masks: MaskConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossWeights::default(),
            execution: Execution::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// `explicit`, else `$SKETCHMOD_CONFIG`, else the defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<(Self, Option<PathBuf>)> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        match path {
            Some(p) => Ok((Self::load(&p)?, Some(p))),
            None => Ok((Self::default(), None)),
        }
    }

    /// Cross-section consistency; each section also validates itself.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.training.validate()?;
        self.sampler.validate()?;
        if self.modnet.sketch_channels != self.encoder.channels {
            return Err(Error::Config(format!(
                "modnet.sketch_channels ({}) must equal encoder.channels ({})",
                self.modnet.sketch_channels, self.encoder.channels
            )));
        }
        if self.modnet.latent_channels != self.backbone.latent_channels {
            return Err(Error::Config(format!(
                "modnet.latent_channels ({}) must equal backbone.latent_channels ({})",
                self.modnet.latent_channels, self.backbone.latent_channels
            )));
        }
        if self.backbone.text_dim != self.encoder.channels {
            return Err(Error::Config(format!(
                "backbone.text_dim ({}) must equal encoder.channels ({}) so labels and sketch patches share a space",
                self.backbone.text_dim, self.encoder.channels
            )));
        }
        if self.training.total_train_timesteps != self.backbone.train_timesteps {
            return Err(Error::Config(format!(
                "training.total_train_timesteps ({}) must equal backbone.train_timesteps ({})",
                self.training.total_train_timesteps, self.backbone.train_timesteps
            )));
        }
        if !(self.masks.threshold > -1.0 && self.masks.threshold < 1.0) {
            return Err(Error::Config(format!(
                "masks.threshold {} outside (-1, 1)",
                self.masks.threshold
            )));
        }
        let l = self.backbone.latent_size();
        self.probe.validate((l, l))?;
        Ok(())
    }
}
