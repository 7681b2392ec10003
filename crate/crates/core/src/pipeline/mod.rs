//! Training loop and inference sampler.

mod batch;
mod checkpoint;
mod sample;
mod train;

pub use batch::{build_batch, BatchStreams, SampleStream, TrainingSample};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, CHECKPOINT_SCHEMA_VERSION};
pub use sample::{
    ddim_timesteps, modulated_step_count, sample, sample_with, Overlays, SampleOptions, SampleOutput, StepRecord,
};
pub use train::{train, LossRecord, TrainReport, Trainer, TrainingOutputs};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{tokenize, DiffusionBackbone};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::modnet::ModNet;
use crate::raster::Raster;
use crate::sketch::{
    associate_tokens, derive_masks_with, EncoderConfig, LabelQuery, SemanticMaskSet, ToySketchEncoder,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub total_train_timesteps: usize,
    pub high_noise_fraction: f64,
    pub batch_size: usize,
    pub freehand_fraction: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            total_train_timesteps: 1000,
            high_noise_fraction: 0.1,
            batch_size: 4,
            freehand_fraction: 0.5,
            steps: 200,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

/// `ceil(x)` that ignores representation noise just above an integer.
pub(crate) fn ceil_tol(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "batch_size {} must be even and positive",
                self.batch_size
            )));
        }
        if self.freehand_fraction != 0.5 {
            return Err(Error::Config("freehand_fraction is fixed at 0.5".into()));
        }
        let f = self.high_noise_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("high_noise_fraction {f} outside (0, 1]")));
        }
        if f * (self.total_train_timesteps as f64) < 1.0 - 1e-9 {
            return Err(Error::Config(format!(
                "high_noise_fraction * T = {} covers no timestep",
                f * self.total_train_timesteps as f64
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "learning_rate must be positive, weight_decay non-negative".into(),
            ));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// Inclusive bounds of the training timestep range.
    pub fn timestep_range(&self) -> (usize, usize) {
        let t = self.total_train_timesteps;
        let lo = ceil_tol((1.0 - self.high_noise_fraction) * t as f64).min(t - 1);
        (lo, t - 1)
    }
}

/// Uniform draw over `[ceil((1 - fraction) T), T - 1]`.
pub fn sample_training_timestep(config: &TrainingConfig, rng: &mut impl Rng) -> usize {
    let (lo, hi) = config.timestep_range();
    rng.random_range(lo..=hi)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub inference_steps: usize,
    pub modulated_fraction: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            inference_steps: 50,
            modulated_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.inference_steps == 0 {
            return Err(Error::Config("inference_steps must be at least 1".into()));
        }
        let f = self.modulated_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("modulated_fraction {f} outside (0, 1]")));
        }
        Ok(())
    }
}

/// Everything a training step or a sampling run needs.
pub struct Components {
    pub config: RunConfig,
    pub backbone: Box<dyn DiffusionBackbone>,
    pub encoder: ToySketchEncoder,
    pub modnet: ModNet,
}

impl std::fmt::Debug for Components {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Components")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Components {
    pub fn build(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        Ok(Components {
            config: config.clone(),
            backbone: config.backbone.build()?,
            encoder: ToySketchEncoder::new(config.encoder.clone())?,
            modnet: ModNet::new(config.modnet)?,
        })
    }

    /// Live (fine-tunable) encoder path.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            trainable_suffix_layers: self.config.encoder.trainable_suffix_layers,
            frozen_reference: false,
        }
    }

    /// Masks from frozen-encoder / label similarity for the caption tokens
    /// matching `vocabulary`; without a vocabulary every caption word is a label.
    pub fn sketch_masks(
        &self,
        sketch: &Raster,
        caption: &str,
        vocabulary: Option<&[String]>,
        threshold: f64,
    ) -> Result<SemanticMaskSet> {
        let cond = self.backbone.encode_text(caption)?;
        let words;
        let vocab = match vocabulary {
            Some(v) => v,
            None => {
                words = tokenize(caption);
                &words[..]
            }
        };
        let queries = associate_tokens(&cond.token_labels, vocab)
            .into_iter()
            .map(|(token_index, label)| {
                Ok(LabelQuery {
                    token_index,
                    embedding: self.backbone.label_embedding(&label)?,
                    label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let reference = EncoderConfig {
            frozen_reference: true,
            ..self.encoder_config()
        };
        let grid = self.encoder.encode_sketch(sketch, &reference)?;
        derive_masks_with(self.config.execution, &grid, &queries, threshold)
    }
}
