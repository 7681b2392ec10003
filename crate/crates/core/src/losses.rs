//! Training objectives: denoising loss, L1 and variance regularizers on the
//! modulation maps, the cross-attention supervision loss and their weighted
//! total. Tensor-valued functions stay on the autodiff tape.

use std::collections::BTreeMap;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modnet::ModulationMaps;
use crate::probe::AttentionMapSet;
use crate::sketch::SemanticMaskSet;
use crate::tensor::{device, LatentTensor, DTYPE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 0.1,
            lambda_reg: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda0, self.lambda1, self.lambda2, self.lambda_reg];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    /// Denoising weight for one sample; freehand sketches have no pixel-aligned target.
    pub fn effective_lambda0(&self, is_freehand: bool) -> f64 {
        if is_freehand {
            0.0
        } else {
            self.lambda0
        }
    }
}

/// Un-weighted loss terms of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub noise: f64,
    pub attn: f64,
    pub l1_scale: f64,
    pub l1_shift: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub noise: f64,
    pub attn: f64,
    pub l1_scale: f64,
    pub l1_shift: f64,
    pub variance: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts {
        LossParts {
            noise: self.noise,
            attn: self.attn,
            l1_scale: self.l1_scale,
            l1_shift: self.l1_shift,
            variance: self.variance,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.noise,
            self.attn,
            self.l1_scale,
            self.l1_shift,
            self.variance,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// Batch summary. `noise` becomes the mean *gated* denoising term (freehand
    /// samples count as 0), so the batch record satisfies
    /// `total = l0*noise + l1*attn + l2*(l1_scale + l1_shift + variance)` with the
    /// nominal weights.
    pub fn batch_mean(samples: &[(LossBreakdown, bool)], weights: &LossWeights) -> LossBreakdown {
        let n = samples.len().max(1) as f64;
        let mut acc = LossParts::default();
        for (b, freehand) in samples {
            if !freehand {
                acc.noise += b.noise;
            }
            acc.attn += b.attn;
            acc.l1_scale += b.l1_scale;
            acc.l1_shift += b.l1_shift;
            acc.variance += b.variance;
        }
        let parts = LossParts {
            noise: acc.noise / n,
            attn: acc.attn / n,
            l1_scale: acc.l1_scale / n,
            l1_shift: acc.l1_shift / n,
            variance: acc.variance / n,
        };
        total_loss(&parts, weights, false)
    }
}

/// `l0_eff * noise + l1 * attn + l2 * (l1_scale + l1_shift + variance)`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, sample_is_freehand: bool) -> LossBreakdown {
    let l0 = weights.effective_lambda0(sample_is_freehand);
    let reg = parts.l1_scale + parts.l1_shift + parts.variance;
    LossBreakdown {
        noise: parts.noise,
        attn: parts.attn,
        l1_scale: parts.l1_scale,
        l1_shift: parts.l1_shift,
        variance: parts.variance,
        total: l0 * parts.noise + weights.lambda1 * parts.attn + weights.lambda2 * reg,
    }
}

/// Tensor form of [`total_loss`] for the backward pass.
pub fn total_loss_tensor(terms: &LossTerms, weights: &LossWeights, sample_is_freehand: bool) -> Result<Tensor> {
    let l0 = weights.effective_lambda0(sample_is_freehand);
    let reg = ((&terms.l1_scale + &terms.l1_shift)? + &terms.variance)?;
    let t = ((terms.noise.affine(l0, 0.0)? + terms.attn.affine(weights.lambda1, 0.0)?)?
        + reg.affine(weights.lambda2, 0.0)?)?;
    Ok(t)
}

/// Scalar loss tensors of one sample, still attached to the tape.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub noise: Tensor,
    pub attn: Tensor,
    pub l1_scale: Tensor,
    pub l1_shift: Tensor,
    pub variance: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossParts> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_scalar::<f64>()?) };
        Ok(LossParts {
            noise: v(&self.noise)?,
            attn: v(&self.attn)?,
            l1_scale: v(&self.l1_scale)?,
            l1_shift: v(&self.l1_shift)?,
            variance: v(&self.variance)?,
        })
    }
}

/// Mean over all elements of `(eps_true - eps_pred)^2`.
pub fn noise_loss(eps_true: &LatentTensor, eps_pred: &LatentTensor) -> Result<Tensor> {
    eps_true.ensure_same_shape(eps_pred, "noise_loss")?;
    Ok((eps_true.as_tensor() - eps_pred.as_tensor())?.sqr()?.mean_all()?)
}

/// `(||S||_1, ||B||_1)` as raw sums of absolute values.
pub fn l1_regularizers(maps: &ModulationMaps) -> Result<(Tensor, Tensor)> {
    Ok((
        maps.scale.as_tensor().abs()?.sum_all()?,
        maps.shift.as_tensor().abs()?.sum_all()?,
    ))
}

/// Population standard deviation over all elements. At zero variance the
/// value is 0 and the (otherwise unbounded) gradient is taken as 0.
pub fn population_std(x: &Tensor) -> Result<Tensor> {
    let centered = x.broadcast_sub(&x.mean_all()?)?;
    let var = centered.sqr()?.mean_all()?;
    if var.to_scalar::<f64>()? > 0.0 {
        Ok(var.sqrt()?)
    } else {
        Ok(var.mul(&var.zeros_like()?)?)
    }
}

/// `-(sigma(S) + sigma(B))`.
pub fn variance_loss(maps: &ModulationMaps) -> Result<Tensor> {
    for m in [&maps.scale, &maps.shift] {
        if m.as_tensor().elem_count() < 2 {
            return Err(Error::Degenerate("variance needs at least two map elements".into()));
        }
    }
    let s = population_std(maps.scale.as_tensor())?;
    let b = population_std(maps.shift.as_tensor())?;
    Ok((s + b)?.neg()?)
}

/// Sum over layers and supervised tokens of
/// `1 - (inside / total)^2 - lambda_reg * inside`, where `inside` is the
/// token's attention mass within its mask and `total` its mass overall.
/// Tokens with an empty mask at a layer, or with zero total mass, contribute 0.
pub fn attention_loss(
    maps: &AttentionMapSet,
    masks: &BTreeMap<String, SemanticMaskSet>,
    lambda_reg: f64,
) -> Result<Tensor> {
    let mut total = Tensor::zeros((), DTYPE, &device())?;
    for (layer, set) in masks {
        let map = maps
            .maps
            .get(layer)
            .ok_or_else(|| Error::contract(format!("masks supervise layer {layer} absent from attention maps")))?;
        let (h, w) = maps.resolutions[layer];
        let (p, l) = map.dims2()?;
        let mut tokens = Vec::new();
        let mut columns = Vec::new();
        for (&tok, mask) in &set.masks {
            if tok >= l {
                return Err(Error::contract(format!(
                    "mask token {tok} absent from attention maps with {l} tokens"
                )));
            }
            if (mask.height, mask.width) != (h, w) {
                return Err(Error::contract(format!(
                    "mask for token {tok} is {}x{}, layer {layer} is {h}x{w}",
                    mask.height, mask.width
                )));
            }
            if mask.is_empty() {
                continue;
            }
            tokens.push(tok as u32);
            columns.push(mask.bits.iter().map(|&b| b as f64).collect::<Vec<_>>());
        }
        if tokens.is_empty() {
            continue;
        }
        let k = tokens.len();
        let idx = Tensor::from_vec(tokens, k, &device())?;
        let selected = map.index_select(&idx, 1)?; // (P, K)
        let mut mask_data = vec![0.0; p * k];
        for (j, col) in columns.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                mask_data[i * k + j] = *v;
            }
        }
        let mask_t = Tensor::from_vec(mask_data, (p, k), &device())?;
        let inside = (&selected * &mask_t)?.sum(0)?;
        let mass = selected.sum(0)?;
        let keep: Vec<u32> = mass
            .to_vec1::<f64>()?
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(j, _)| j as u32)
            .collect();
        if keep.is_empty() {
            continue;
        }
        let (inside, mass) = if keep.len() == k {
            (inside, mass)
        } else {
            let kidx = Tensor::from_vec(keep.clone(), keep.len(), &device())?;
            (inside.index_select(&kidx, 0)?, mass.index_select(&kidx, 0)?)
        };
        let ratio = (&inside / &mass)?;
        let terms = ((ratio.sqr()?.neg()? + 1.0)? - inside.affine(lambda_reg, 0.0)?)?;
        total = (total + terms.sum_all()?)?;
    }
    Ok(total)
}
