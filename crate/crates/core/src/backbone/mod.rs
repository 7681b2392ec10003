//! Latent-diffusion backbone: noise schedule, autoencoder, text encoder and
//! text-conditioned noise predictor.
//!
//! [`DiffusionBackbone`] is the contract the rest of the crate programs
//! against. [`ToyBackbone`] is a deterministic, weight-free implementation that
//! makes every training and sampling path executable offline.

mod denoiser;
mod schedule;
mod text;
mod vae;

pub use denoiser::{ToyDenoiser, ToyDenoiserConfig};
pub use schedule::{NoiseSchedule, ScheduleKind, REFERENCE_STEPS};
pub use text::{tokenize, TextCondition, ToyTextEncoder, END_TOKEN, PAD_TOKEN, START_TOKEN};
pub use vae::ToyAutoencoder;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{AttentionMapSet, LayerSpec};
use crate::raster::Raster;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone)]
pub struct DenoiserOutput {
    pub eps_pred: LatentTensor,
    /// Head-averaged cross-attention per probe layer; only when probing.
    pub attention_maps: Option<AttentionMapSet>,
}

pub trait DiffusionBackbone: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    /// `(channels, height, width)` of latents this backbone operates on.
    fn latent_shape(&self) -> (usize, usize, usize);

    /// `(width, height)` of images the autoencoder maps onto `latent_shape`.
    fn image_size(&self) -> (usize, usize);

    fn vae_encode(&self, image: &Raster) -> Result<LatentTensor>;

    fn vae_decode(&self, z: &LatentTensor) -> Result<Raster>;

    fn encode_text(&self, caption: &str) -> Result<TextCondition>;

    /// Embedding of an object label in the space shared with sketch features.
    fn label_embedding(&self, label: &str) -> Result<Vec<f64>>;

    fn denoise(&self, z_t: &LatentTensor, t: usize, cond: &TextCondition, probe: bool) -> Result<DenoiserOutput>;

    /// Cross-attention layers that `denoise(.., probe = true)` reports.
    fn probe_layers(&self) -> Vec<LayerSpec>;

    fn parameter_names(&self) -> Vec<String>;

    fn parameter_checksum(&self) -> Result<String>;

    fn forward_noise(&self, z0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
        self.schedule().forward_noise(z0, t, eps)
    }

    fn predict_x0(&self, z_t: &LatentTensor, eps_prime: &LatentTensor, t: usize) -> Result<LatentTensor> {
        self.schedule().predict_x0(z_t, eps_prime, t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    Toy,
    /// Adapter around pretrained weights; not shipped.
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub image_size: usize,
    pub reduction_factor: usize,
    pub latent_channels: usize,
    pub schedule: ScheduleKind,
    pub train_timesteps: usize,
    pub width: usize,
    pub text_dim: usize,
    pub context_length: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub attention_resolutions: Vec<usize>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Toy,
            image_size: 128,
            reduction_factor: 4,
            latent_channels: 4,
            schedule: ScheduleKind::ScaledLinear,
            train_timesteps: 1000,
            width: 32,
            text_dim: 32,
            context_length: 77,
            attn_dim: 32,
            heads: 2,
            time_dim: 32,
            attention_resolutions: vec![8, 16, 32],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn latent_size(&self) -> usize {
        self.image_size / self.reduction_factor
    }

    pub fn build(&self) -> Result<Box<dyn DiffusionBackbone>> {
        match self.kind {
            BackboneKind::Toy => Ok(Box::new(ToyBackbone::new(self)?)),
            BackboneKind::External => Err(Error::Config(
                "backbone.kind = \"external\" requires an adapter that is not part of this build".into(),
            )),
        }
    }
}

#[derive(Debug)]
pub struct ToyBackbone {
    config: BackboneConfig,
    schedule: NoiseSchedule,
    vae: ToyAutoencoder,
    text: ToyTextEncoder,
    denoiser: ToyDenoiser,
}

impl ToyBackbone {
    pub fn new(config: &BackboneConfig) -> Result<Self> {
        if config.image_size == 0 || !config.image_size.is_multiple_of(config.reduction_factor) {
            return Err(Error::geometry(format!(
                "image_size {} not divisible by reduction_factor {}",
                config.image_size, config.reduction_factor
            )));
        }
        let schedule = match config.schedule {
            ScheduleKind::Custom => {
                return Err(Error::Config("backbone.schedule cannot be custom".into()));
            }
            kind => NoiseSchedule::new(kind, config.train_timesteps)?,
        };
        let vae = ToyAutoencoder::new(config.reduction_factor, config.latent_channels)?;
        let text = ToyTextEncoder::new(config.text_dim, config.context_length, config.seed)?;
        let denoiser = ToyDenoiser::new(ToyDenoiserConfig {
            latent_channels: config.latent_channels,
            latent_size: config.latent_size(),
            width: config.width,
            text_dim: config.text_dim,
            attn_dim: config.attn_dim,
            heads: config.heads,
            time_dim: config.time_dim,
            attention_resolutions: config.attention_resolutions.clone(),
            seed: config.seed,
        })?;
        Ok(ToyBackbone {
            config: config.clone(),
            schedule,
            vae,
            text,
            denoiser,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &ToyTextEncoder {
        &self.text
    }

    pub fn autoencoder(&self) -> &ToyAutoencoder {
        &self.vae
    }
}

impl DiffusionBackbone for ToyBackbone {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn latent_shape(&self) -> (usize, usize, usize) {
        let s = self.config.latent_size();
        (self.config.latent_channels, s, s)
    }

    fn image_size(&self) -> (usize, usize) {
        (self.config.image_size, self.config.image_size)
    }

    fn vae_encode(&self, image: &Raster) -> Result<LatentTensor> {
        self.vae.encode(image)
    }

    fn vae_decode(&self, z: &LatentTensor) -> Result<Raster> {
        self.vae.decode(z)
    }

    fn encode_text(&self, caption: &str) -> Result<TextCondition> {
        self.text.encode(caption)
    }

    fn label_embedding(&self, label: &str) -> Result<Vec<f64>> {
        self.text.label_embedding(label)
    }

    fn denoise(&self, z_t: &LatentTensor, t: usize, cond: &TextCondition, probe: bool) -> Result<DenoiserOutput> {
        let a = self.schedule.alpha_bar(t)?;
        let (eps_pred, attention_maps) = self.denoiser.forward(z_t, t, (1.0 - a).sqrt(), cond, probe)?;
        Ok(DenoiserOutput {
            eps_pred,
            attention_maps,
        })
    }

    fn probe_layers(&self) -> Vec<LayerSpec> {
        self.denoiser.probe_layers()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.denoiser.params().names()
    }

    fn parameter_checksum(&self) -> Result<String> {
        self.denoiser.params().checksum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rng;

    fn small(attn: Vec<usize>) -> ToyBackbone {
        ToyBackbone::new(&BackboneConfig {
            image_size: 64,
            context_length: 8,
            attention_resolutions: attn,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn denoise_is_deterministic_and_probe_flag_is_honoured() {
        let bb = small(vec![8, 16]);
        let cond = bb.encode_text("a cat on a mat").unwrap();
        let z = LatentTensor::randn(bb.latent_shape(), &mut rng(9)).unwrap();
        let a = bb.denoise(&z, 950, &cond, true).unwrap();
        let b = bb.denoise(&z, 950, &cond, true).unwrap();
        assert_eq!(a.eps_pred.to_vec().unwrap(), b.eps_pred.to_vec().unwrap());
        assert!(a.eps_pred.is_finite().unwrap());
        let maps = a.attention_maps.unwrap();
        assert_eq!(maps.len(), 2);
        let mut pixels: Vec<usize> = maps.maps.values().map(|m| m.dims()[0]).collect();
        pixels.sort();
        assert_eq!(pixels, vec![64, 256]);
        assert!(maps.max_row_sum_error().unwrap() < 1e-5);
        assert!(bb.denoise(&z, 950, &cond, false).unwrap().attention_maps.is_none());
    }

    #[test]
    fn rebuilt_backbones_are_bitwise_identical() {
        let a = small(vec![8, 16]);
        let b = small(vec![8, 16]);
        assert_eq!(a.parameter_checksum().unwrap(), b.parameter_checksum().unwrap());
    }

    #[test]
    fn rejects_unreachable_attention_resolution() {
        let err = ToyBackbone::new(&BackboneConfig {
            image_size: 64,
            attention_resolutions: vec![12],
            ..Default::default()
        });
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn external_kind_is_a_config_error() {
        let cfg = BackboneConfig {
            kind: BackboneKind::External,
            ..Default::default()
        };
        assert!(matches!(cfg.build(), Err(Error::Config(_))));
    }

    #[test]
    fn denoise_rejects_wrong_geometry() {
        let bb = small(vec![8]);
        let cond = bb.encode_text("x").unwrap();
        let z = LatentTensor::zeros((4, 8, 8)).unwrap();
        assert!(matches!(bb.denoise(&z, 0, &cond, false), Err(Error::Contract(_))));
    }
}
