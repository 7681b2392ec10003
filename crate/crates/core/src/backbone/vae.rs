use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::LatentTensor;

/// Training-free autoencoder: every `f x f x 3` image patch is projected onto a
/// fixed orthonormal basis of `latent_channels` structured patterns (mean
/// intensity, horizontal ramp, vertical ramp, red-blue opponent, ...).
///
/// Encoding after decoding is exact. Decoding after encoding is the orthogonal
/// projection onto the decoder's range, so it reproduces exactly the images
/// that lie in that range.
#[derive(Debug, Clone)]
pub struct ToyAutoencoder {
    factor: usize,
    latent_channels: usize,
    /// `latent_channels` rows of length `factor * factor * 3`, orthonormal.
    basis: Vec<Vec<f64>>,
    scale: f64,
}

pub const IMAGE_CHANNELS: usize = 3;
const MAX_CHANNELS: usize = 6;

impl ToyAutoencoder {
    pub fn new(factor: usize, latent_channels: usize) -> Result<Self> {
        if factor < 2 {
            return Err(Error::Config(format!("reduction factor must be >= 2, got {factor}")));
        }
        if latent_channels == 0 || latent_channels > MAX_CHANNELS {
            return Err(Error::Config(format!(
                "toy autoencoder supports 1..={MAX_CHANNELS} latent channels, got {latent_channels}"
            )));
        }
        let d = factor * factor * IMAGE_CHANNELS;
        let centered = |i: usize| i as f64 - (factor as f64 - 1.0) / 2.0;
        let pattern = |k: usize| -> Vec<f64> {
            let mut v = vec![0.0; d];
            for y in 0..factor {
                for x in 0..factor {
                    for c in 0..IMAGE_CHANNELS {
                        let idx = (y * factor + x) * IMAGE_CHANNELS + c;
                        v[idx] = match k {
                            0 => 1.0,
                            1 => centered(x),
                            2 => centered(y),
                            3 => [1.0, 0.0, -1.0][c],
                            4 => [-0.5, 1.0, -0.5][c],
                            _ => centered(x) * centered(y),
                        };
                    }
                }
            }
            v
        };
        // Gram-Schmidt; the patterns are already mutually orthogonal, this
        // only normalizes and guards against rounding.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(latent_channels);
        for k in 0..latent_channels {
            let mut v = pattern(k);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
            }
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
        Ok(ToyAutoencoder {
            factor,
            latent_channels,
            basis,
            scale: 1.0 / factor as f64,
        })
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn latent_channels(&self) -> usize {
        self.latent_channels
    }

    pub fn latent_shape_for(&self, width: usize, height: usize) -> Result<(usize, usize, usize)> {
        if width == 0 || height == 0 || !width.is_multiple_of(self.factor) || !height.is_multiple_of(self.factor) {
            return Err(Error::geometry(format!(
                "image {width}x{height} is not divisible by the reduction factor {}",
                self.factor
            )));
        }
        Ok((self.latent_channels, height / self.factor, width / self.factor))
    }

    pub fn encode(&self, image: &Raster) -> Result<LatentTensor> {
        let (c, lh, lw) = self.latent_shape_for(image.width, image.height)?;
        let rgb = image.to_rgb();
        let f = self.factor;
        let mut out = vec![0.0; c * lh * lw];
        let mut patch = vec![0.0; f * f * IMAGE_CHANNELS];
        for py in 0..lh {
            for px in 0..lw {
                for y in 0..f {
                    for x in 0..f {
                        for ch in 0..IMAGE_CHANNELS {
                            patch[(y * f + x) * IMAGE_CHANNELS + ch] = 2.0 * rgb.get(px * f + x, py * f + y, ch) - 1.0;
                        }
                    }
                }
                for (k, b) in self.basis.iter().enumerate() {
                    let coeff: f64 = b.iter().zip(&patch).map(|(a, p)| a * p).sum();
                    out[(k * lh + py) * lw + px] = coeff * self.scale;
                }
            }
        }
        LatentTensor::from_vec(out, (c, lh, lw))
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<Raster> {
        let (c, lh, lw) = z.shape();
        if c != self.latent_channels {
            return Err(Error::contract(format!(
                "latent has {c} channels, autoencoder expects {}",
                self.latent_channels
            )));
        }
        let zv = z.to_vec()?;
        let f = self.factor;
        let mut img = Raster::filled(lw * f, lh * f, IMAGE_CHANNELS, 0.0);
        for py in 0..lh {
            for px in 0..lw {
                for y in 0..f {
                    for x in 0..f {
                        for ch in 0..IMAGE_CHANNELS {
                            let idx = (y * f + x) * IMAGE_CHANNELS + ch;
                            let v: f64 = (0..c)
                                .map(|k| zv[(k * lh + py) * lw + px] / self.scale * self.basis[k][idx])
                                .sum();
                            img.set(px * f + x, py * f + y, ch, (v + 1.0) / 2.0);
                        }
                    }
                }
            }
        }
        Ok(img)
    }
}
