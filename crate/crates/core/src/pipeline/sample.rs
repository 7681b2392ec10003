use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modnet::{modulate, ModulationMaps};
use crate::pipeline::{ceil_tol, Components, SamplerConfig};
use crate::probe::{attention_tiles, probe_attention};
use crate::raster::Raster;
use crate::tensor::{stream_rng, LatentTensor};

/// One entry of the step trace. `step_index` is 1-based; step 1 is the
/// noisiest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: usize,
    pub modulated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    /// When false the modnet is never applied (plain backbone sampling).
    pub modulate: bool,
    pub overlays: bool,
    /// Keep the latent after every step in [`SampleOutput::latents`].
    pub keep_latents: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            modulate: true,
            overlays: false,
            keep_latents: false,
        }
    }
}

/// Inspection rasters captured at the first (noisiest) step.
#[derive(Debug, Clone)]
pub struct Overlays {
    /// Keyed `"<token_index>:<label>"`, at the sketch-encoder grid resolution.
    pub masks: BTreeMap<String, Raster>,
    /// One strip per probe layer, a tile per supervised token.
    pub attention: BTreeMap<String, Raster>,
    pub scale_map: Raster,
    pub shift_map: Raster,
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: Raster,
    pub latent: LatentTensor,
    pub trace: Vec<StepRecord>,
    pub latents: Vec<LatentTensor>,
    pub overlays: Option<Overlays>,
}

/// `T-1, T-1-c, ...` with stride `c = T / n`; `n` timesteps, noisiest first.
pub fn ddim_timesteps(total: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > total {
        return Err(Error::Config(format!("inference_steps {n} must lie in 1..={total}")));
    }
    let stride = total / n;
    Ok((0..n).map(|k| total - 1 - k * stride).collect())
}

/// `ceil(fraction * n)`, at least 1 and at most `n`.
pub fn modulated_step_count(n: usize, fraction: f64) -> usize {
    ceil_tol(fraction * n as f64).clamp(1, n.max(1))
}

pub fn sample(
    sketch: &Raster,
    caption: &str,
    sampler: &SamplerConfig,
    components: &Components,
) -> Result<SampleOutput> {
    sample_with(sketch, caption, sampler, components, SampleOptions::default())
}

/// Deterministic DDIM (eta = 0) from seeded Gaussian noise. The modulation
/// network adjusts the noise prediction on the first
/// `ceil(modulated_fraction * inference_steps)` steps only.
pub fn sample_with(
    sketch: &Raster,
    caption: &str,
    sampler: &SamplerConfig,
    components: &Components,
    options: SampleOptions,
) -> Result<SampleOutput> {
    sampler.validate()?;
    let backbone = components.backbone.as_ref();
    let schedule = backbone.schedule();
    let ts = ddim_timesteps(schedule.total_steps(), sampler.inference_steps)?;
    let n_mod = modulated_step_count(ts.len(), sampler.modulated_fraction);
    let cond = backbone.encode_text(caption)?;
    let grid = components
        .encoder
        .encode_sketch(sketch, &components.encoder_config())?
        .detach();

    let mut z = LatentTensor::randn(backbone.latent_shape(), &mut stream_rng(sampler.seed, 0))?;
    let mut trace = Vec::with_capacity(ts.len());
    let mut latents = Vec::new();
    let mut overlays = None;
    for (k, &t) in ts.iter().enumerate() {
        let modulated = options.modulate && k < n_mod;
        let eps = backbone.denoise(&z, t, &cond, false)?.eps_pred;
        let mut maps = None;
        if modulated || (options.overlays && k == 0) {
            let m = components.modnet.forward(&grid, &eps, &z, t)?;
            maps = Some(ModulationMaps {
                scale: m.scale.detach(),
                shift: m.shift.detach(),
                t,
            });
        }
        let eps_used = match (&maps, modulated) {
            (Some(m), true) => modulate(&eps, m)?,
            _ => eps,
        };
        if options.overlays && k == 0 {
            let m = maps.as_ref().expect("maps computed for overlays");
            overlays = Some(build_overlays(components, sketch, caption, &z, t, &eps_used, m)?);
        }
        let a_prev = match ts.get(k + 1) {
            Some(&tn) => schedule.alpha_bar(tn)?,
            None => 1.0,
        };
        let x0 = schedule.predict_x0(&z, &eps_used, t)?;
        let next =
            (x0.as_tensor().affine(a_prev.sqrt(), 0.0)? + eps_used.as_tensor().affine((1.0 - a_prev).sqrt(), 0.0)?)?;
        z = LatentTensor::new(next)?.detach();
        if options.keep_latents {
            latents.push(z.clone());
        }
        trace.push(StepRecord {
            step_index: k + 1,
            t,
            modulated,
        });
    }
    Ok(SampleOutput {
        image: backbone.vae_decode(&z)?,
        latent: z,
        trace,
        latents,
        overlays,
    })
}

/// Channel mean of a latent-shaped map, min-max scaled into [0, 1].
fn map_raster(t: &LatentTensor) -> Result<Raster> {
    let (c, h, w) = t.shape();
    let v = t.to_vec()?;
    let mean: Vec<f64> = (0..h * w)
        .map(|i| (0..c).map(|ch| v[ch * h * w + i]).sum::<f64>() / c as f64)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = mean
        .iter()
        .map(|x| if span > 0.0 { (x - lo) / span } else { 0.5 })
        .collect();
    Raster::new(w, h, 1, data)
}

fn build_overlays(
    components: &Components,
    sketch: &Raster,
    caption: &str,
    z: &LatentTensor,
    t: usize,
    eps_used: &LatentTensor,
    maps: &ModulationMaps,
) -> Result<Overlays> {
    let backbone = components.backbone.as_ref();
    let cond = backbone.encode_text(caption)?;
    let set = components.sketch_masks(sketch, caption, None, components.config.masks.threshold)?;
    let tokens: Vec<usize> = set.masks.keys().copied().collect();
    let masks = set
        .masks
        .iter()
        .map(|(tok, m)| {
            let data = m.bits.iter().map(|&b| b as f64).collect();
            let label = set.token_labels.get(tok).cloned().unwrap_or_default();
            Ok((format!("{tok}:{label}"), Raster::new(m.width, m.height, 1, data)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let probe = probe_attention(backbone, z, t, eps_used, &cond, &components.config.probe)?;
    let attention = probe
        .maps
        .iter()
        .map(|(id, m)| {
            let (h, w) = probe.resolutions[id];
            Ok((id.clone(), attention_tiles(m, h, w, &tokens)?))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(Overlays {
        masks,
        attention,
        scale_map: map_raster(&maps.scale)?,
        shift_map: map_raster(&maps.shift)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timestep_spacing() {
        let ts = ddim_timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[1], ts[49]), (999, 979, 19));
        assert_eq!(ddim_timesteps(10, 10).unwrap(), (0..10).rev().collect::<Vec<_>>());
        assert!(ddim_timesteps(10, 11).is_err());
    }

    #[test]
    fn modulated_counts() {
        assert_eq!(modulated_step_count(50, 0.1), 5);
        assert_eq!(modulated_step_count(50, 0.3), 15);
        assert_eq!(modulated_step_count(3, 0.1), 1);
        assert_eq!(modulated_step_count(50, 1.0), 50);
    }
}
