use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

/// Number of steps of the reference schedule every built-in kind is defined on.
pub const REFERENCE_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Betas linear in `[1e-4, 2e-2]`.
    Linear,
    /// Square roots of the betas linear in `[sqrt(0.00085), sqrt(0.012)]`.
    ScaledLinear,
    /// User-supplied cumulative coefficients.
    Custom,
}

/// Cumulative signal coefficients `alpha_bar[t]`, `t = 0..T`.
///
/// Built-in kinds are defined on a 1000-step reference chain. A schedule with
/// `T != 1000` is the reference chain respaced onto `T` evenly spaced
/// reference steps, so the first step is always near-clean and the last always
/// near-pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, total_steps: usize) -> Result<Self> {
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => linspace(1e-4, 2e-2, REFERENCE_STEPS),
            ScheduleKind::ScaledLinear => linspace(0.00085f64.sqrt(), 0.012f64.sqrt(), REFERENCE_STEPS)
                .into_iter()
                .map(|b| b * b)
                .collect(),
            ScheduleKind::Custom => {
                return Err(Error::Config(
                    "custom schedules are built with NoiseSchedule::from_alpha_bar".into(),
                ))
            }
        };
        let mut reference = Vec::with_capacity(REFERENCE_STEPS);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            reference.push(acc);
        }
        Self::respaced(kind, &reference, total_steps)
    }

    pub fn scaled_linear(total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::ScaledLinear, total_steps)
    }

    pub fn linear(total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, total_steps)
    }

    fn respaced(kind: ScheduleKind, reference: &[f64], total_steps: usize) -> Result<Self> {
        if total_steps == 0 || total_steps > reference.len() {
            return Err(Error::range(
                "total_steps",
                total_steps,
                format!("1..={}", reference.len()),
            ));
        }
        let last = reference.len() - 1;
        let alpha_bar = if total_steps == reference.len() {
            reference.to_vec()
        } else if total_steps == 1 {
            vec![reference[last]]
        } else {
            (0..total_steps)
                .map(|k| {
                    let idx = (k as f64 * last as f64 / (total_steps - 1) as f64).round() as usize;
                    reference[idx]
                })
                .collect()
        };
        Ok(NoiseSchedule { kind, alpha_bar })
    }

    /// Values must lie in `[0, 1]` and decrease strictly. A trailing zero
    /// (zero terminal SNR) is accepted; `predict_x0` rejects that step.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.is_empty() {
            return Err(Error::Config("alpha_bar must be non-empty".into()));
        }
        if alpha_bar.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha_bar values must lie in [0, 1]".into()));
        }
        if alpha_bar.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("alpha_bar must be strictly decreasing".into()));
        }
        Ok(NoiseSchedule {
            kind: ScheduleKind::Custom,
            alpha_bar,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::range("timestep", t, format!("0..{}", self.alpha_bar.len())))
    }

    /// `z_t = sqrt(a) z0 + sqrt(1 - a) eps` with `a = alpha_bar[t]`.
    pub fn forward_noise(&self, z0: &LatentTensor, t: usize, eps: &LatentTensor) -> Result<LatentTensor> {
        z0.ensure_same_shape(eps, "forward_noise")?;
        let a = self.alpha_bar(t)?;
        let z = (z0.as_tensor().affine(a.sqrt(), 0.0)? + eps.as_tensor().affine((1.0 - a).sqrt(), 0.0)?)?;
        LatentTensor::new(z)
    }

    /// Inverts `forward_noise` for a given noise estimate:
    /// `z0_hat = (z_t - sqrt(1 - a) eps') / sqrt(a)`. No clipping is applied.
    pub fn predict_x0(&self, z_t: &LatentTensor, eps_prime: &LatentTensor, t: usize) -> Result<LatentTensor> {
        z_t.ensure_same_shape(eps_prime, "predict_x0")?;
        let a = self.alpha_bar(t)?;
        if a <= 0.0 {
            return Err(Error::SingularCoefficient { t, alpha_bar: a });
        }
        let num = (z_t.as_tensor() - eps_prime.as_tensor().affine((1.0 - a).sqrt(), 0.0)?)?;
        LatentTensor::new((num / a.sqrt())?)
    }
}

fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
        .collect()
}
