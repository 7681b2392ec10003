//! Small layer toolkit over candle tensors, shared by the toy backbone, the
//! sketch encoder and the modulation network. Parameters live in a
//! [`ParamStore`], so frozen and trainable modules share one code path.

use candle_core::{Module, Tensor, D};
use rand::Rng;

use crate::error::Result;
use crate::tensor::{device, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    /// He-style init scaled by `gain`; `gain = 0` gives an all-zero layer.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let shape = [c_out, c_in, kernel, kernel];
        let weight = if gain == 0.0 {
            store.constant(&format!("{name}.weight"), &shape, 0.0)?
        } else {
            store.randn(&format!("{name}.weight"), &shape, gain / fan_in.sqrt(), rng)?
        };
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Conv2d {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn from_weight(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight,
            bias,
            padding,
            stride,
        }
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_in * c_out * kernel * kernel + c_out
    }
}

/// Convolution as im2col (shifted, strided slices) followed by one matmul.
/// Candle's native conv backward always builds the kernel gradient with a
/// large-kernel convolution, even for frozen weights; this formulation keeps
/// the backward pass to slicing and matrix products.
impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (c_out, _, k, _) = self.weight.dims4()?;
        let (p, s) = (self.padding, self.stride);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let y = if k == 1 && p == 0 && s == 1 {
            let wm = self.weight.reshape((c_out, c))?;
            wm.broadcast_left(n)?.contiguous()?.matmul(&x.reshape((n, c, h * w))?)?
        } else if k == s && p == 0 && h % k == 0 && w % k == 0 {
            // non-overlapping patches
            let cols = x
                .reshape((n, c, ho, k, wo, k))?
                .permute((0, 3, 5, 1, 2, 4))?
                .contiguous()?
                .reshape((n, k * k * c, ho * wo))?;
            let wm = self.weight.permute((0, 2, 3, 1))?.reshape((c_out, k * k * c))?;
            wm.broadcast_left(n)?.contiguous()?.matmul(&cols)?
        } else {
            // Extra bottom/right zeros let every strided window be cut as
            // `s * out` rows before subsampling.
            let need_h = (k - 1 + s * ho).max(h + 2 * p);
            let need_w = (k - 1 + s * wo).max(w + 2 * p);
            let xp = x
                .pad_with_zeros(2, p, need_h - h - p)?
                .pad_with_zeros(3, p, need_w - w - p)?;
            let mut cols = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let mut v = xp.narrow(2, ky, s * ho)?.narrow(3, kx, s * wo)?;
                    if s > 1 {
                        v = v
                            .reshape((n, c, ho, s, wo, s))?
                            .narrow(3, 0, 1)?
                            .narrow(5, 0, 1)?
                            .reshape((n, c, ho, wo))?;
                    }
                    cols.push(v);
                }
            }
            let cols = Tensor::cat(&cols, 1)?.reshape((n, k * k * c, ho * wo))?;
            let wm = self.weight.permute((0, 2, 3, 1))?.reshape((c_out, k * k * c))?;
            wm.broadcast_left(n)?.contiguous()?.matmul(&cols)?
        };
        let y = y.reshape((n, c_out, ho, wo))?;
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Stride-`k` transposed convolution with a `k x k` kernel (exact `k`-fold upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        factor: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan_in = (c_in * factor * factor) as f64;
        let weight = store.randn(
            &format!("{name}.weight"),
            &[c_in, c_out, factor, factor],
            (2.0 / fan_in).sqrt(),
            rng,
        )?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride: factor,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, factor: usize) -> usize {
        c_in * c_out * factor * factor + c_out
    }
}

/// Each input pixel expands to its own `k x k` output block, so the layer is
/// one matmul followed by a pixel shuffle.
impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (_, c_out, k, _) = self.weight.dims4()?;
        let xm = x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let wm = self.weight.reshape((c, c_out * k * k))?;
        let y = xm.matmul(&wm.broadcast_left(n)?.contiguous()?)?; // (n, h*w, c_out*k*k)
        let y = y
            .reshape((n, h, w, c_out, k, k))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((n, c_out, h * k, w * k))?;
        debug_assert_eq!(k, self.stride);
        y.broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.randn(
            &format!("{name}.weight"),
            &[d_out, d_in],
            gain / (d_in as f64).sqrt(),
            rng,
        )?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn param_count(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }
}

impl Module for Linear {
    /// `x`: `(n, d_in)` -> `(n, d_out)`.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm(candle_nn::GroupNorm);

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let groups = num_groups(channels);
        let w = store.constant(&format!("{name}.weight"), &[channels], 1.0)?;
        let b = store.constant(&format!("{name}.bias"), &[channels], 0.0)?;
        Ok(GroupNorm(candle_nn::GroupNorm::new(w, b, channels, groups, 1e-5)?))
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.0.forward(x)
    }
}

/// Largest of {32, 16, 8, 4, 2, 1} dividing `channels`, capped so each group
/// keeps at least two channels when possible.
pub fn num_groups(channels: usize) -> usize {
    [32usize, 16, 8, 4, 2, 1]
        .into_iter()
        .find(|&g| channels.is_multiple_of(g) && (channels / g >= 2 || g == 1))
        .unwrap_or(1)
}

/// Two 3x3 convolutions, each followed by group normalization and SiLU. An
/// optional per-channel bias is injected right after the first convolution.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

impl DoubleConv {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(DoubleConv {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, 1.0, rng)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_out)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, 1.0, rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out)?,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        Conv2d::param_count(c_in, c_out, 3) + Conv2d::param_count(c_out, c_out, 3) + 2 * GroupNorm::param_count(c_out)
    }

    /// `channel_bias`: `(1, c_out)`.
    pub fn forward_with_bias(&self, x: &Tensor, channel_bias: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(x)?;
        if let Some(b) = channel_bias {
            h = h.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
        }
        let h = self.norm1.forward(&h)?.silu()?;
        let h = self.conv2.forward(&h)?;
        Ok(self.norm2.forward(&h)?.silu()?)
    }
}

impl Module for DoubleConv {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.forward_with_bias(x, None)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))
    }
}

/// Transformer-style sinusoidal embedding of a (possibly fractional) timestep; `(1, dim)`.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut v = vec![0.0f64; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t * freq).sin();
        v[half + i] = (t * freq).cos();
    }
    Ok(Tensor::from_vec(v, (1, dim), &device())?)
}

/// Row-stochastic `out x in` matrix for 1-D bilinear resampling with
/// half-pixel centers (`align_corners = false`).
pub fn bilinear_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = src - i0 as f64;
        m[o * n_in + i0] += 1.0 - frac;
        m[o * n_in + i1] += frac;
    }
    m
}

/// Bilinear resize of `(n, c, h, w)` to `(n, c, out_h, out_w)` as two matrix
/// products, so it is differentiable with respect to `x`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ry = Tensor::from_vec(bilinear_matrix(out_h, h), (out_h, h), &device())?;
    let rx_t = Tensor::from_vec(bilinear_matrix(out_w, w), (out_w, w), &device())?.t()?;
    let y = ry
        .broadcast_left(x.dims()[..2].to_vec())?
        .contiguous()?
        .matmul(&x.contiguous()?)?;
    let y = y.matmul(&rx_t.broadcast_left(x.dims()[..2].to_vec())?.contiguous()?)?;
    Ok(y)
}

/// Softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (o, i) in [(16, 14), (4, 4), (8, 3), (3, 8)] {
            let m = bilinear_matrix(o, i);
            for r in 0..o {
                let s: f64 = m[r * i..(r + 1) * i].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let m = bilinear_matrix(5, 5);
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(m[r * 5 + c], if r == c { 1.0 } else { 0.0 });
            }
        }
        let x = Tensor::full(2.5f64, (1, 2, 3, 3), &device()).unwrap();
        let y = resize_bilinear(&x, 7, 5).unwrap();
        assert_eq!(y.dims(), &[1, 2, 7, 5]);
        for v in y.flatten_all().unwrap().to_vec1::<f64>().unwrap() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    fn native_conv_matches(c_in: usize, c_out: usize, k: usize, s: usize, p: usize, hw: (usize, usize)) {
        let mut r = crate::tensor::rng(k as u64 * 31 + s as u64);
        let mut store = ParamStore::new("t", true);
        let conv = Conv2d::new(&mut store, "c", c_in, c_out, k, s, p, 1.0, &mut r).unwrap();
        let x = Tensor::from_vec(
            crate::tensor::gaussian_vec(2 * c_in * hw.0 * hw.1, &mut r),
            (2, c_in, hw.0, hw.1),
            &device(),
        )
        .unwrap();
        let ours = conv.forward(&x).unwrap();
        let native = x.conv2d(&conv.weight, p, s, 1, 1).unwrap();
        assert_eq!(ours.dims(), native.dims());
        let d = (ours - native)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn conv_matches_native_convolution() {
        native_conv_matches(3, 5, 3, 1, 1, (7, 6));
        native_conv_matches(4, 2, 3, 2, 1, (8, 8));
        native_conv_matches(4, 2, 3, 2, 1, (7, 9));
        native_conv_matches(2, 3, 1, 1, 0, (5, 4));
        native_conv_matches(1, 4, 4, 4, 0, (16, 12));
    }

    #[test]
    fn transposed_conv_matches_native() {
        let mut r = crate::tensor::rng(9);
        let mut store = ParamStore::new("t", true);
        let up = ConvTranspose2d::new(&mut store, "u", 3, 2, 2, &mut r).unwrap();
        let x = Tensor::from_vec(
            crate::tensor::gaussian_vec(2 * 3 * 4 * 5, &mut r),
            (2, 3, 4, 5),
            &device(),
        )
        .unwrap();
        let ours = up.forward(&x).unwrap();
        let native = x.conv_transpose2d(&up.weight, 0, 0, 2, 1).unwrap();
        assert_eq!(ours.dims(), native.dims());
        let d = (ours - native)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(d < 1e-12, "{d}");
    }

    #[test]
    fn group_counts_divide_channels() {
        for c in [1, 2, 4, 8, 16, 24, 128, 256, 384, 512] {
            let g = num_groups(c);
            assert_eq!(c % g, 0);
        }
        assert_eq!(num_groups(8), 4);
        assert_eq!(num_groups(256), 32);
    }
}
