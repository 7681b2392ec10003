//! Cross-attention probing: recover the denoised latent from the modulated
//! noise, re-run the denoiser on it with text conditioning and harvest the
//! head-averaged attention maps that the attention loss supervises.
//!
//! Everything here stays on the autodiff tape: gradients of the returned
//! maps reach `eps_prime` (and through it the modulation network). The
//! backbone's own weights are frozen.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::{DiffusionBackbone, TextCondition};
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::sketch::SemanticMaskSet;
use crate::tensor::LatentTensor;

pub fn layer_id(h: usize, w: usize) -> String {
    format!("xattn_{h}x{w}")
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub height: usize,
    pub width: usize,
}

impl LayerSpec {
    pub fn square(res: usize) -> Self {
        LayerSpec {
            id: layer_id(res, res),
            height: res,
            width: res,
        }
    }
}

/// Per-layer `(pixels, tokens)` attention, rows softmax-normalized over tokens.
#[derive(Debug, Clone)]
pub struct AttentionMapSet {
    pub maps: BTreeMap<String, Tensor>,
    pub resolutions: BTreeMap<String, (usize, usize)>,
}

impl AttentionMapSet {
    pub fn new(maps: BTreeMap<String, Tensor>, resolutions: BTreeMap<String, (usize, usize)>) -> Result<Self> {
        for (id, m) in &maps {
            let (h, w) = resolutions
                .get(id)
                .copied()
                .ok_or_else(|| Error::contract(format!("attention layer {id} has no resolution")))?;
            let (p, _) = m.dims2()?;
            if p != h * w {
                return Err(Error::contract(format!("attention layer {id}: {p} rows for {h}x{w}")));
            }
        }
        Ok(AttentionMapSet { maps, resolutions })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for m in self.maps.values() {
            for s in m.sum(1)?.to_vec1::<f64>()? {
                worst = worst.max((s - 1.0).abs());
            }
        }
        Ok(worst)
    }

    pub fn min_value(&self) -> Result<f64> {
        let mut lo = f64::INFINITY;
        for m in self.maps.values() {
            lo = lo.min(m.flatten_all()?.min(0)?.to_scalar::<f64>()?);
        }
        Ok(lo)
    }

    pub fn detach(&self) -> Self {
        AttentionMapSet {
            maps: self.maps.iter().map(|(k, v)| (k.clone(), v.detach())).collect(),
            resolutions: self.resolutions.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Square resolutions of the probed cross-attention layers.
    pub resolutions: Vec<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            resolutions: vec![8, 16, 32],
        }
    }
}

impl ProbeConfig {
    pub fn layers(&self) -> Vec<LayerSpec> {
        self.resolutions.iter().map(|&r| LayerSpec::square(r)).collect()
    }

    pub fn validate(&self, latent_hw: (usize, usize)) -> Result<()> {
        if self.resolutions.is_empty() {
            return Err(Error::Config("probe needs at least one layer".into()));
        }
        for &r in &self.resolutions {
            if r == 0 || !latent_hw.0.is_multiple_of(r) || !latent_hw.1.is_multiple_of(r) {
                return Err(Error::Config(format!(
                    "probe resolution {r} does not divide latent {}x{}",
                    latent_hw.0, latent_hw.1
                )));
            }
        }
        Ok(())
    }
}

/// Forms `z0_hat = predict_x0(z_t, eps_prime, t)` and re-runs the denoiser on it
/// at the same timestep, returning the maps of the configured layers.
pub fn probe_attention(
    backbone: &dyn DiffusionBackbone,
    z_t: &LatentTensor,
    t: usize,
    eps_prime: &LatentTensor,
    cond: &TextCondition,
    config: &ProbeConfig,
) -> Result<AttentionMapSet> {
    let available = backbone.probe_layers();
    for layer in config.layers() {
        if !available.contains(&layer) {
            return Err(Error::Config(format!(
                "probe layer {} is not present in the backbone (available: {:?})",
                layer.id,
                available.iter().map(|l| &l.id).collect::<Vec<_>>()
            )));
        }
    }
    let z0_hat = backbone.predict_x0(z_t, eps_prime, t)?;
    let out = backbone.denoise(&z0_hat, t, cond, true)?;
    let all = out
        .attention_maps
        .ok_or_else(|| Error::contract("backbone returned no attention maps while probing"))?;
    let mut maps = BTreeMap::new();
    let mut resolutions = BTreeMap::new();
    for layer in config.layers() {
        let m = all
            .maps
            .get(&layer.id)
            .ok_or_else(|| Error::contract(format!("backbone omitted probe layer {}", layer.id)))?;
        maps.insert(layer.id.clone(), m.clone());
        resolutions.insert(layer.id.clone(), (layer.height, layer.width));
    }
    AttentionMapSet::new(maps, resolutions)
}

/// One mask set per probe layer, at that layer's resolution.
pub fn resample_masks(masks: &SemanticMaskSet, config: &ProbeConfig) -> BTreeMap<String, SemanticMaskSet> {
    config
        .layers()
        .into_iter()
        .map(|l| (l.id, masks.resample(l.height, l.width)))
        .collect()
}

/// Writes one grayscale grid per layer (a tile per token, attention rescaled to
/// the layer maximum) plus the resampled masks and a JSON index.
pub fn export_debug(
    maps: &AttentionMapSet,
    layer_masks: &BTreeMap<String, SemanticMaskSet>,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut index = Vec::new();
    for (id, m) in &maps.maps {
        let (h, w) = maps.resolutions[id];
        let tokens: Vec<usize> = match layer_masks.get(id) {
            Some(set) if !set.masks.is_empty() => set.masks.keys().copied().collect(),
            _ => (0..m.dims()[1]).collect(),
        };
        let tiles = attention_tiles(m, h, w, &tokens)?;
        let path = dir.join(format!("{id}_attention.png"));
        tiles.save_png(&path)?;
        written.push(path.clone());
        let mut entry = serde_json::json!({
            "layer": id, "height": h, "width": w, "tokens": tokens,
            "attention": path.file_name().unwrap().to_string_lossy(),
        });
        if let Some(set) = layer_masks.get(id) {
            let (png, _) = crate::sketch::export_mask_set(set, dir, &format!("{id}_masks"))?;
            entry["masks"] = serde_json::json!(png.file_name().unwrap().to_string_lossy());
            written.push(png);
        }
        index.push(entry);
    }
    let idx = dir.join("index.json");
    std::fs::write(&idx, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&idx, e))?;
    written.push(idx);
    Ok(written)
}

/// Horizontal strip of `h x w` tiles, one per token column, normalized by the
/// strip maximum.
pub fn attention_tiles(map: &Tensor, h: usize, w: usize, tokens: &[usize]) -> Result<Raster> {
    let (_, l) = map.dims2()?;
    let data = map.detach().to_vec2::<f64>()?;
    let n = tokens.len().max(1);
    let mut out = Raster::filled(w * n, h, 1, 0.0);
    let max = tokens
        .iter()
        .filter(|&&t| t < l)
        .flat_map(|&t| data.iter().map(move |row| row[t]))
        .fold(0.0f64, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    for (i, &t) in tokens.iter().enumerate().filter(|(_, &t)| t < l) {
        for y in 0..h {
            for x in 0..w {
                out.set(i * w + x, y, 0, data[y * w + x][t] * scale);
            }
        }
    }
    Ok(out)
}
