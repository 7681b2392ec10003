use std::collections::BTreeMap;

use candle_core::{Module, Tensor};

use crate::backbone::text::TextCondition;
use crate::error::{Error, Result};
use crate::nn::{sinusoidal_embedding, softmax_last, Conv2d, Linear};
use crate::probe::{layer_id, AttentionMapSet, LayerSpec};
use crate::tensor::{rng, LatentTensor, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiserConfig {
    pub latent_channels: usize,
    pub latent_size: usize,
    pub width: usize,
    pub text_dim: usize,
    pub attn_dim: usize,
    pub heads: usize,
    pub time_dim: usize,
    /// Square resolutions carrying a cross-attention block; each must be
    /// `latent_size / 2^k`.
    pub attention_resolutions: Vec<usize>,
    pub seed: u64,
}

/// One cross-attention block: queries from image features, keys and values
/// from token embeddings, multi-head, residual.
#[derive(Debug)]
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    head_dim: usize,
}

impl CrossAttention {
    /// `x`: `(1, C, h, w)`. Returns the updated features and the head-averaged
    /// `(h*w, L)` attention matrix.
    fn forward(&self, x: &Tensor, text: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, c, h, w) = x.dims4()?;
        let p = h * w;
        let l = text.dims()[0];
        let tokens = x.reshape((c, p))?.t()?.contiguous()?; // (P, C)
        let q = self
            .q
            .forward(&tokens)?
            .reshape((p, self.heads, self.head_dim))?
            .transpose(0, 1)?
            .contiguous()?;
        let k = self
            .k
            .forward(text)?
            .reshape((l, self.heads, self.head_dim))?
            .transpose(0, 1)?
            .contiguous()?;
        let v = self
            .v
            .forward(text)?
            .reshape((l, self.heads, self.head_dim))?
            .transpose(0, 1)?
            .contiguous()?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? / (self.head_dim as f64).sqrt())?; // (H, P, L)
        let probs = softmax_last(&logits)?;
        let mixed = probs
            .matmul(&v)?
            .transpose(0, 1)?
            .contiguous()?
            .reshape((p, self.heads * self.head_dim))?;
        let delta = self.out.forward(&mixed)?.t()?.contiguous()?.reshape((1, c, h, w))?;
        let map = (probs.sum(0)? / self.heads as f64)?;
        Ok(((x + delta)?, map))
    }
}

#[derive(Debug)]
struct Level {
    resolution: usize,
    time_proj: Linear,
    conv: Conv2d,
    attn: Option<CrossAttention>,
}

/// Small convolutional encoder-decoder conditioned on text through one
/// cross-attention block per declared resolution and on time through a
/// sinusoidal embedding. Weights are fixed pseudo-random draws from the seed.
///
/// The output is `sqrt(1 - alpha_bar_t) * z_t + residual(z_t, t, c)`: the first
/// term is the exact noise posterior mean for unit-Gaussian latents, so even
/// untrained the network behaves like a plausible noise predictor.
#[derive(Debug)]
pub struct ToyDenoiser {
    config: ToyDenoiserConfig,
    params: ParamStore,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Level>,
    up: Vec<Conv2d>,
    conv_out: Conv2d,
}

impl ToyDenoiser {
    pub fn new(config: ToyDenoiserConfig) -> Result<Self> {
        let c = &config;
        if c.attention_resolutions.is_empty() {
            return Err(Error::Config("denoiser needs at least one attention resolution".into()));
        }
        if !c.attn_dim.is_multiple_of(c.heads) {
            return Err(Error::Config(format!(
                "attn_dim {} not divisible by heads {}",
                c.attn_dim, c.heads
            )));
        }
        let min_res = *c.attention_resolutions.iter().min().unwrap();
        let mut resolutions = vec![c.latent_size];
        while *resolutions.last().unwrap() > min_res {
            let r = *resolutions.last().unwrap();
            if r % 2 != 0 {
                break;
            }
            resolutions.push(r / 2);
        }
        for r in &c.attention_resolutions {
            if !resolutions.contains(r) {
                return Err(Error::Config(format!(
                    "attention resolution {r} is not latent_size {} / 2^k",
                    c.latent_size
                )));
            }
        }

        let mut r = rng(c.seed);
        let mut params = ParamStore::new("backbone", false);
        let w = c.width;
        let time_in = Linear::new(&mut params, "time.fc1", c.time_dim, w, true, 1.0, &mut r)?;
        let time_out = Linear::new(&mut params, "time.fc2", w, w, true, 1.0, &mut r)?;
        let conv_in = Conv2d::new(&mut params, "conv_in", c.latent_channels, w, 3, 1, 1, 1.0, &mut r)?;
        let mut down = Vec::new();
        for (i, &res) in resolutions.iter().enumerate() {
            let attn = if c.attention_resolutions.contains(&res) {
                let name = format!("down{i}.{}", layer_id(res, res));
                let head_dim = c.attn_dim / c.heads;
                Some(CrossAttention {
                    q: Linear::new(&mut params, &format!("{name}.q"), w, c.attn_dim, false, 1.0, &mut r)?,
                    k: Linear::new(
                        &mut params,
                        &format!("{name}.k"),
                        c.text_dim,
                        c.attn_dim,
                        false,
                        1.0,
                        &mut r,
                    )?,
                    v: Linear::new(
                        &mut params,
                        &format!("{name}.v"),
                        c.text_dim,
                        c.attn_dim,
                        false,
                        1.0,
                        &mut r,
                    )?,
                    out: Linear::new(&mut params, &format!("{name}.out"), c.attn_dim, w, true, 0.5, &mut r)?,
                    heads: c.heads,
                    head_dim,
                })
            } else {
                None
            };
            down.push(Level {
                resolution: res,
                time_proj: Linear::new(&mut params, &format!("down{i}.time"), w, w, true, 0.5, &mut r)?,
                conv: Conv2d::new(&mut params, &format!("down{i}.conv"), w, w, 3, 1, 1, 0.7, &mut r)?,
                attn,
            });
        }
        let up = (0..resolutions.len().saturating_sub(1))
            .map(|i| Conv2d::new(&mut params, &format!("up{i}.conv"), w, w, 3, 1, 1, 0.7, &mut r))
            .collect::<Result<Vec<_>>>()?;
        let conv_out = Conv2d::new(&mut params, "conv_out", w, c.latent_channels, 3, 1, 1, 0.2, &mut r)?;
        Ok(ToyDenoiser {
            config,
            params,
            time_in,
            time_out,
            conv_in,
            down,
            up,
            conv_out,
        })
    }

    pub fn config(&self) -> &ToyDenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn probe_layers(&self) -> Vec<LayerSpec> {
        self.down
            .iter()
            .filter(|l| l.attn.is_some())
            .map(|l| LayerSpec::square(l.resolution))
            .collect()
    }

    /// Returns `(eps_pred, attention maps)`; maps are only collected when `probe`.
    pub fn forward(
        &self,
        z_t: &LatentTensor,
        t: usize,
        noise_scale: f64,
        cond: &TextCondition,
        probe: bool,
    ) -> Result<(LatentTensor, Option<AttentionMapSet>)> {
        let c = &self.config;
        if z_t.shape() != (c.latent_channels, c.latent_size, c.latent_size) {
            return Err(Error::contract(format!(
                "denoiser expects latent {:?}, got {:?}",
                (c.latent_channels, c.latent_size, c.latent_size),
                z_t.shape()
            )));
        }
        if cond.dim() != c.text_dim {
            return Err(Error::contract(format!(
                "text embeddings have dim {}, denoiser expects {}",
                cond.dim(),
                c.text_dim
            )));
        }
        let temb = sinusoidal_embedding(t as f64, c.time_dim)?;
        let temb = self.time_out.forward(&self.time_in.forward(&temb)?.silu()?)?; // (1, w)

        let x = z_t.batched()?;
        let mut h = self.conv_in.forward(&x)?;
        let mut maps = BTreeMap::new();
        let mut resolutions = BTreeMap::new();
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, level) in self.down.iter().enumerate() {
            let tb = level.time_proj.forward(&temb.silu()?)?.reshape((1, (), 1, 1))?;
            h = h.broadcast_add(&tb)?;
            h = (&h + level.conv.forward(&h.silu()?)?)?;
            if let Some(attn) = &level.attn {
                let (next, map) = attn.forward(&h, &cond.token_embeddings)?;
                h = next;
                if probe {
                    let id = layer_id(level.resolution, level.resolution);
                    maps.insert(id.clone(), map);
                    resolutions.insert(id, (level.resolution, level.resolution));
                }
            }
            skips.push(h.clone());
            if i + 1 < self.down.len() {
                h = h.avg_pool2d(2)?;
            }
        }
        for (i, conv) in self.up.iter().enumerate().rev() {
            h = (h.upsample_nearest2d(self.down[i].resolution, self.down[i].resolution)? + &skips[i])?;
            h = (&h + conv.forward(&h.silu()?)?)?;
        }
        let residual = self.conv_out.forward(&h.silu()?)?.squeeze(0)?;
        let eps = (z_t.as_tensor().affine(noise_scale, 0.0)? + residual)?;
        let maps = if probe {
            Some(AttentionMapSet::new(maps, resolutions)?)
        } else {
            None
        };
        Ok((LatentTensor::new(eps)?, maps))
    }
}
