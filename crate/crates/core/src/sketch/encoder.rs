use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::raster::Raster;
use crate::tensor::{device, orthogonal, rng, ParamStore};

/// `C x h x w` patch features of one sketch.
#[derive(Debug, Clone)]
pub struct SketchFeatureGrid {
    pub features: Tensor,
    pub encoder_id: String,
}

impl SketchFeatureGrid {
    pub fn new(features: Tensor, encoder_id: impl Into<String>) -> Result<Self> {
        let dims = features.dims();
        if dims.len() != 3 || dims.contains(&0) {
            return Err(Error::contract(format!(
                "sketch grid must be non-empty C x h x w, got {dims:?}"
            )));
        }
        Ok(SketchFeatureGrid {
            features,
            encoder_id: encoder_id.into(),
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.features.dims();
        (d[0], d[1], d[2])
    }

    /// Feature vector of every patch, row-major over `h x w`.
    pub fn patch_vectors(&self) -> Result<Vec<Vec<f64>>> {
        let (c, h, w) = self.shape();
        let flat = self.features.flatten_all()?.to_vec1::<f64>()?;
        Ok((0..h * w)
            .map(|p| (0..c).map(|ch| flat[ch * h * w + p]).collect())
            .collect())
    }

    /// Spatial mean of the features, a global sketch embedding.
    pub fn pooled(&self) -> Result<Vec<f64>> {
        let (c, h, w) = self.shape();
        Ok(self.features.reshape((c, h * w))?.mean(1)?.to_vec1::<f64>()?)
    }

    pub fn detach(&self) -> Self {
        SketchFeatureGrid {
            features: self.features.detach(),
            encoder_id: self.encoder_id.clone(),
        }
    }
}

/// Runtime options for an encode call and the fine-tuning layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub trainable_suffix_layers: usize,
    /// Encode with the weights as they were before any fine-tuning.
    pub frozen_reference: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            trainable_suffix_layers: 3,
            frozen_reference: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SketchEncoderConfig {
    /// Sketches are resized to `input_size x input_size` before encoding.
    pub input_size: usize,
    pub channels: usize,
    pub grid: usize,
    pub depth: usize,
    pub trainable_suffix_layers: usize,
    pub seed: u64,
}

impl Default for SketchEncoderConfig {
    fn default() -> Self {
        SketchEncoderConfig {
            input_size: 128,
            channels: 32,
            grid: 4,
            depth: 5,
            trainable_suffix_layers: 3,
            seed: 0,
        }
    }
}

/// Names of the parameters that fine-tuning may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParameterSelection {
    pub layers: Vec<usize>,
    pub names: Vec<String>,
}

impl ParameterSelection {
    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Stand-in for a pretrained sketch encoder: a patch-embedding convolution
/// followed by residual 1x1 layers, all with fixed random-orthogonal weights.
/// Layers are numbered from 1; the last `trainable_suffix_layers` are exposed
/// for fine-tuning. A snapshot of the initial weights backs the
/// frozen-reference path used for ground-truth masks.
#[derive(Debug)]
pub struct ToySketchEncoder {
    config: SketchEncoderConfig,
    params: ParamStore,
    reference: ParamStore,
}

impl ToySketchEncoder {
    pub fn new(config: SketchEncoderConfig) -> Result<Self> {
        let c = &config;
        if c.grid == 0 || !c.input_size.is_multiple_of(c.grid) {
            return Err(Error::Config(format!(
                "encoder input_size {} must be a positive multiple of grid {}",
                c.input_size, c.grid
            )));
        }
        if c.depth == 0 || c.channels == 0 {
            return Err(Error::Config("encoder depth and channels must be positive".into()));
        }
        if c.trainable_suffix_layers > c.depth {
            return Err(Error::range(
                "trainable_suffix_layers",
                c.trainable_suffix_layers,
                format!("0..={}", c.depth),
            ));
        }
        let patch = c.input_size / c.grid;
        let mut r = rng(c.seed ^ 0x5ce7_c4e5);
        let mut params = ParamStore::new("encoder", true);
        let embed = orthogonal(c.channels, patch * patch, &mut r);
        let gain = (c.channels as f64 / (patch * patch) as f64).sqrt().max(1.0);
        params.from_vec(
            "layer1.weight",
            embed.into_iter().map(|v| v * gain).collect(),
            &[c.channels, 1, patch, patch],
        )?;
        params.constant("layer1.bias", &[c.channels], 0.0)?;
        for k in 2..=c.depth {
            let w = orthogonal(c.channels, c.channels, &mut r);
            params.from_vec(&format!("layer{k}.weight"), w, &[c.channels, c.channels, 1, 1])?;
            params.constant(&format!("layer{k}.bias"), &[c.channels], 0.0)?;
        }
        let reference = ParamStore::new("encoder_ref", false);
        let mut enc = ToySketchEncoder {
            config,
            params,
            reference,
        };
        let snapshot = enc.params.tensors();
        for (name, t) in snapshot {
            let short = name.trim_start_matches("encoder.");
            enc.reference.insert(short, t.copy()?)?;
        }
        Ok(enc)
    }

    pub fn config(&self) -> &SketchEncoderConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn output_shape(&self) -> (usize, usize, usize) {
        (self.config.channels, self.config.grid, self.config.grid)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn encoder_id(&self) -> String {
        format!(
            "toy-sketch-encoder/c{}-g{}-d{}-s{}",
            self.config.channels, self.config.grid, self.config.depth, self.config.seed
        )
    }

    /// Parameters of the last `config.trainable_suffix_layers` layers.
    pub fn trainable_parameters(&self, config: &EncoderConfig) -> Result<ParameterSelection> {
        let depth = self.config.depth;
        let k = config.trainable_suffix_layers;
        if k > depth {
            return Err(Error::range("trainable_suffix_layers", k, format!("0..={depth}")));
        }
        let layers: Vec<usize> = (depth - k + 1..=depth).collect();
        let names = layers
            .iter()
            .flat_map(|l| [format!("encoder.layer{l}.bias"), format!("encoder.layer{l}.weight")])
            .collect();
        Ok(ParameterSelection { layers, names })
    }

    /// Variables handed to the optimizer for the configured suffix.
    pub fn trainable_vars(&self) -> Result<Vec<Var>> {
        let sel = self.trainable_parameters(&EncoderConfig {
            trainable_suffix_layers: self.config.trainable_suffix_layers,
            frozen_reference: false,
        })?;
        Ok(sel.names.iter().filter_map(|n| self.params.get(n).cloned()).collect())
    }

    fn layer_weights(&self, k: usize, frozen_reference: bool) -> Result<(Tensor, Tensor)> {
        let fetch = |store: &ParamStore, prefix: &str| -> Result<(Tensor, Tensor)> {
            let w = store
                .get(&format!("{prefix}.layer{k}.weight"))
                .ok_or_else(|| Error::contract(format!("missing encoder layer {k}")))?;
            let b = store
                .get(&format!("{prefix}.layer{k}.bias"))
                .ok_or_else(|| Error::contract(format!("missing encoder layer {k}")))?;
            Ok((w.as_tensor().clone(), b.as_tensor().clone()))
        };
        if frozen_reference {
            let (w, b) = fetch(&self.reference, "encoder_ref")?;
            return Ok((w.detach(), b.detach()));
        }
        let (w, b) = fetch(&self.params, "encoder")?;
        let trainable_from = self.config.depth - self.config.trainable_suffix_layers + 1;
        if k >= trainable_from {
            Ok((w, b))
        } else {
            Ok((w.detach(), b.detach()))
        }
    }

    pub fn encode_sketch(&self, sketch: &Raster, config: &EncoderConfig) -> Result<SketchFeatureGrid> {
        if sketch.is_empty() {
            return Err(Error::Input("empty sketch image".into()));
        }
        let c = &self.config;
        let gray = sketch.to_gray().resize_nearest(c.input_size, c.input_size);
        // ink = 1 on a white ground
        let ink: Vec<f64> = gray.data.iter().map(|v| 1.0 - v).collect();
        let x = Tensor::from_vec(ink, (1, 1, c.input_size, c.input_size), &device())?;
        let patch = c.input_size / c.grid;
        let (w, b) = self.layer_weights(1, config.frozen_reference)?;
        let mut h = Conv2d::from_weight(w, b, patch, 0);
        let mut x = candle_core::Module::forward(&h, &x)?;
        for k in 2..=c.depth {
            let (w, b) = self.layer_weights(k, config.frozen_reference)?;
            h = Conv2d::from_weight(w, b, 1, 0);
            x = (&x + candle_core::Module::forward(&h, &x)?.tanh()?)?;
        }
        SketchFeatureGrid::new(x.squeeze(0)?, self.encoder_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sketch(n: usize) -> Raster {
        let mut r = Raster::filled(n, n, 1, 1.0);
        for i in 0..n {
            r.set(i, n / 2, 0, 0.0);
            r.set(n / 3, i, 0, 0.0);
        }
        r
    }

    #[test]
    fn geometry_and_determinism() {
        let enc = ToySketchEncoder::new(SketchEncoderConfig {
            input_size: 32,
            channels: 32,
            grid: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = EncoderConfig::default();
        let a = enc.encode_sketch(&sketch(32), &cfg).unwrap();
        let b = enc.encode_sketch(&sketch(32), &cfg).unwrap();
        assert_eq!(a.shape(), (32, 4, 4));
        assert_eq!(
            a.features.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.features.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }

    #[test]
    fn full_scale_geometry() {
        let enc = ToySketchEncoder::new(SketchEncoderConfig {
            input_size: 224,
            channels: 512,
            grid: 14,
            ..Default::default()
        })
        .unwrap();
        let g = enc.encode_sketch(&sketch(224), &EncoderConfig::default()).unwrap();
        assert_eq!(g.shape(), (512, 14, 14));
    }

    #[test]
    fn suffix_selection() {
        let enc = ToySketchEncoder::new(SketchEncoderConfig::default()).unwrap();
        let sel = |k| {
            enc.trainable_parameters(&EncoderConfig {
                trainable_suffix_layers: k,
                frozen_reference: false,
            })
        };
        assert!(sel(0).unwrap().is_empty());
        assert_eq!(sel(3).unwrap().layers, vec![3, 4, 5]);
        assert_eq!(sel(5).unwrap().names.len(), enc.params().names().len());
        assert!(matches!(sel(6), Err(Error::Range { .. })));
    }

    #[test]
    fn empty_sketch_is_an_input_error() {
        let enc = ToySketchEncoder::new(SketchEncoderConfig::default()).unwrap();
        let empty = Raster::filled(0, 0, 1, 1.0);
        assert!(matches!(
            enc.encode_sketch(&empty, &EncoderConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn frozen_reference_survives_fine_tuning() {
        let enc = ToySketchEncoder::new(SketchEncoderConfig {
            input_size: 32,
            ..Default::default()
        })
        .unwrap();
        let frozen = EncoderConfig {
            trainable_suffix_layers: 3,
            frozen_reference: true,
        };
        let before = enc.encode_sketch(&sketch(32), &frozen).unwrap();
        let tuned_before = enc.encode_sketch(&sketch(32), &EncoderConfig::default()).unwrap();
        for v in enc.trainable_vars().unwrap() {
            let bumped = (v.as_tensor() + 0.25).unwrap();
            v.set(&bumped).unwrap();
        }
        let after = enc.encode_sketch(&sketch(32), &frozen).unwrap();
        let tuned_after = enc.encode_sketch(&sketch(32), &EncoderConfig::default()).unwrap();
        let bytes = |g: &SketchFeatureGrid| g.features.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(bytes(&before), bytes(&after));
        assert_ne!(bytes(&tuned_before), bytes(&tuned_after));
    }
}
