//! Three-branch encoder-decoder modulation network and the noise-modulation rule.
//!
//! Layout (channel counts for the default configuration, `b = base_channels = 16`):
//!
//! | path      | layers                                                                   |
//! |-----------|--------------------------------------------------------------------------|
//! | sketch    | DoubleConv 512->256, DoubleConv 256->128, bilinear resize to latent/8    |
//! | noise     | DoubleConv 4->16, pool, 16->32, pool, 32->64, pool, 64->128              |
//! | latent    | same as noise                                                            |
//! | fusion    | concat (384) -> DoubleConv 384->256, time bias after its first conv      |
//! | upsample  | ConvT 256->128, DC 128->64, ConvT 64->32, DC 32->16, ConvT 16->8, DC 8->8 |
//! | final     | Conv 8->8, split into scale (4) and shift (4)                            |

use candle_core::{Module, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, sinusoidal_embedding, Conv2d, ConvTranspose2d, DoubleConv, Linear};
use crate::sketch::SketchFeatureGrid;
use crate::tensor::{rng, LatentTensor, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModNetConfig {
    pub sketch_channels: usize,
    pub latent_channels: usize,
    pub fusion_channels: usize,
    pub time_embed_dim: usize,
    /// Width of the first noise/latent stage; every other width derives from
    /// it (paths end at `8 * base`, the decoder ends at `base / 2`).
    pub base_channels: usize,
    pub zero_init_final: bool,
    pub seed: u64,
}

impl Default for ModNetConfig {
    fn default() -> Self {
        ModNetConfig {
            sketch_channels: 512,
            latent_channels: 4,
            fusion_channels: 256,
            time_embed_dim: 256,
            base_channels: 16,
            zero_init_final: true,
            seed: 0,
        }
    }
}

impl ModNetConfig {
    pub fn toy() -> Self {
        ModNetConfig {
            sketch_channels: 32,
            latent_channels: 4,
            fusion_channels: 64,
            time_embed_dim: 32,
            base_channels: 8,
            zero_init_final: true,
            seed: 0,
        }
    }

    pub fn path_channels(&self) -> usize {
        8 * self.base_channels
    }

    fn validate(&self) -> Result<()> {
        let c = self;
        if c.sketch_channels == 0
            || c.latent_channels == 0
            || c.fusion_channels == 0
            || c.time_embed_dim == 0
            || c.base_channels < 2
            || !c.base_channels.is_multiple_of(2)
        {
            return Err(Error::Config(format!(
                "modnet channel counts must be positive and base_channels even: {c:?}"
            )));
        }
        Ok(())
    }
}

/// Per-element scale `S` and shift `B` for one timestep.
#[derive(Debug, Clone)]
pub struct ModulationMaps {
    pub scale: LatentTensor,
    pub shift: LatentTensor,
    pub t: usize,
}

impl ModulationMaps {
    pub fn zeros(shape: (usize, usize, usize), t: usize) -> Result<Self> {
        Ok(ModulationMaps {
            scale: LatentTensor::zeros(shape)?,
            shift: LatentTensor::zeros(shape)?,
            t,
        })
    }
}

/// `eps' = eps * (1 + S) + B`.
pub fn modulate(eps: &LatentTensor, maps: &ModulationMaps) -> Result<LatentTensor> {
    eps.ensure_same_shape(&maps.scale, "modulate (scale)")?;
    eps.ensure_same_shape(&maps.shift, "modulate (shift)")?;
    let one_plus_s = maps.scale.as_tensor().affine(1.0, 1.0)?;
    let out = ((eps.as_tensor() * one_plus_s)? + maps.shift.as_tensor())?;
    LatentTensor::new(out)
}

#[derive(Debug)]
struct DownPath {
    stages: Vec<DoubleConv>,
}

impl DownPath {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, base: usize, r: &mut impl rand::Rng) -> Result<Self> {
        let widths = [base, 2 * base, 4 * base, 8 * base];
        let mut stages = Vec::with_capacity(4);
        let mut prev = c_in;
        for (i, &w) in widths.iter().enumerate() {
            stages.push(DoubleConv::new(store, &format!("{name}.dc{}", i + 1), prev, w, r)?);
            prev = w;
        }
        Ok(DownPath { stages })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            if i > 0 {
                h = h.max_pool2d(2)?;
            }
            h = stage.forward_with_bias(&h, None)?;
        }
        Ok(h)
    }
}

#[derive(Debug)]
pub struct ModNet {
    config: ModNetConfig,
    params: ParamStore,
    sketch1: DoubleConv,
    sketch2: DoubleConv,
    noise_path: DownPath,
    latent_path: DownPath,
    time_fc1: Linear,
    time_fc2: Linear,
    fusion: DoubleConv,
    up1: ConvTranspose2d,
    up_conv1: DoubleConv,
    up2: ConvTranspose2d,
    up_conv2: DoubleConv,
    up3: ConvTranspose2d,
    up_conv3: DoubleConv,
    final_conv: Conv2d,
}

impl ModNet {
    pub fn new(config: ModNetConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut r = rng(c.seed ^ 0x6d6f_646e);
        let mut s = ParamStore::new("modnet", true);
        let p = c.path_channels();
        let (u1, u2, u3) = (p / 2, p / 8, p / 16);
        let sketch1 = DoubleConv::new(&mut s, "sketch.dc1", c.sketch_channels, 2 * p, &mut r)?;
        let sketch2 = DoubleConv::new(&mut s, "sketch.dc2", 2 * p, p, &mut r)?;
        let noise_path = DownPath::new(&mut s, "noise", c.latent_channels, c.base_channels, &mut r)?;
        let latent_path = DownPath::new(&mut s, "latent", c.latent_channels, c.base_channels, &mut r)?;
        let time_fc1 = Linear::new(
            &mut s,
            "time.fc1",
            c.time_embed_dim,
            c.time_embed_dim,
            true,
            1.0,
            &mut r,
        )?;
        let time_fc2 = Linear::new(
            &mut s,
            "time.fc2",
            c.time_embed_dim,
            c.fusion_channels,
            true,
            1.0,
            &mut r,
        )?;
        let fusion = DoubleConv::new(&mut s, "fusion", 3 * p, c.fusion_channels, &mut r)?;
        let up1 = ConvTranspose2d::new(&mut s, "up1", c.fusion_channels, p, 2, &mut r)?;
        let up_conv1 = DoubleConv::new(&mut s, "up_conv1", p, u1, &mut r)?;
        let up2 = ConvTranspose2d::new(&mut s, "up2", u1, p / 4, 2, &mut r)?;
        let up_conv2 = DoubleConv::new(&mut s, "up_conv2", p / 4, u2, &mut r)?;
        let up3 = ConvTranspose2d::new(&mut s, "up3", u2, u3, 2, &mut r)?;
        let up_conv3 = DoubleConv::new(&mut s, "up_conv3", u3, u3, &mut r)?;
        let gain = if c.zero_init_final { 0.0 } else { 1.0 };
        let final_conv = Conv2d::new(&mut s, "final", u3, 2 * c.latent_channels, 3, 1, 1, gain, &mut r)?;
        Ok(ModNet {
            config,
            params: s,
            sketch1,
            sketch2,
            noise_path,
            latent_path,
            time_fc1,
            time_fc2,
            fusion,
            up1,
            up_conv1,
            up2,
            up_conv2,
            up3,
            up_conv3,
            final_conv,
        })
    }

    pub fn config(&self) -> &ModNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.vars()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.num_params()
    }

    pub fn forward(
        &self,
        sketch: &SketchFeatureGrid,
        eps: &LatentTensor,
        z_t: &LatentTensor,
        t: usize,
    ) -> Result<ModulationMaps> {
        let c = &self.config;
        eps.ensure_same_shape(z_t, "modnet_forward")?;
        let (lc, h, w) = z_t.shape();
        if lc != c.latent_channels {
            return Err(Error::contract(format!(
                "latent has {lc} channels, modnet expects {}",
                c.latent_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::geometry(format!(
                "latent {h}x{w} must be divisible by 8 (three 2x downsamples)"
            )));
        }
        let (sc, _, _) = sketch.shape();
        if sc != c.sketch_channels {
            return Err(Error::contract(format!(
                "sketch grid has {sc} channels, modnet expects {}",
                c.sketch_channels
            )));
        }
        let (fh, fw) = (h / 8, w / 8);

        let s = sketch.features.unsqueeze(0)?;
        let s = self.sketch1.forward_with_bias(&s, None)?;
        let s = self.sketch2.forward_with_bias(&s, None)?;
        let s = resize_bilinear(&s, fh, fw)?;
        let n = self.noise_path.forward(&eps.batched()?)?;
        let l = self.latent_path.forward(&z_t.batched()?)?;
        let fused = Tensor::cat(&[&s, &n, &l], 1)?;

        let temb = sinusoidal_embedding(t as f64, c.time_embed_dim)?;
        let tbias = self.time_fc2.forward(&self.time_fc1.forward(&temb)?.silu()?)?;
        let x = self.fusion.forward_with_bias(&fused, Some(&tbias))?;

        let x = self.up_conv1.forward_with_bias(&self.up1.forward(&x)?, None)?;
        let x = self.up_conv2.forward_with_bias(&self.up2.forward(&x)?, None)?;
        let x = self.up_conv3.forward_with_bias(&self.up3.forward(&x)?, None)?;
        let out = self.final_conv.forward(&x)?.squeeze(0)?;
        let scale = out.narrow(0, 0, c.latent_channels)?;
        let shift = out.narrow(0, c.latent_channels, c.latent_channels)?;
        Ok(ModulationMaps {
            scale: LatentTensor::new(scale)?,
            shift: LatentTensor::new(shift)?,
            t,
        })
    }
}

/// Trainable parameters of the network built from `config` (encoder excluded).
pub fn parameter_count(config: &ModNetConfig) -> Result<usize> {
    Ok(ModNet::new(*config)?.parameter_count())
}
