//! Latent tensors, seeded randomness and named parameter storage.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// All numerics run in double precision on the CPU.
pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent, reproducible stream for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn gaussian_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Row-major `rows x cols` matrix with orthonormal rows (or columns, whichever
/// is the shorter side).
pub fn orthogonal(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = rows.max(cols);
    let k = rows.min(cols);
    let g = nalgebra::DMatrix::<f64>::from_iterator(n, k, gaussian_vec(n * k, rng));
    let q = g.qr().q(); // n x k, orthonormal columns
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = if rows >= cols { q[(r, c)] } else { q[(c, r)] };
        }
    }
    out
}

/// A `channels x height x width` latent (z0, z_t, eps, eps', S and B all use it).
#[derive(Debug, Clone)]
pub struct LatentTensor(Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::contract(format!(
                "latent must be rank 3 (C,H,W), got shape {:?}",
                t.dims()
            )));
        }
        Ok(LatentTensor(t))
    }

    pub fn from_vec(data: Vec<f64>, shape: (usize, usize, usize)) -> Result<Self> {
        Ok(LatentTensor(Tensor::from_vec(data, shape, &device())?))
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Result<Self> {
        Ok(LatentTensor(Tensor::zeros(shape, DTYPE, &device())?))
    }

    pub fn full(value: f64, shape: (usize, usize, usize)) -> Result<Self> {
        Ok(LatentTensor(Tensor::full(value, shape, &device())?))
    }

    pub fn randn(shape: (usize, usize, usize), rng: &mut impl Rng) -> Result<Self> {
        let n = shape.0 * shape.1 * shape.2;
        Self::from_vec(gaussian_vec(n, rng), shape)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }

    pub fn channels(&self) -> usize {
        self.shape().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.shape();
        (h, w)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Adds the leading batch axis expected by convolution kernels.
    pub fn batched(&self) -> Result<Tensor> {
        Ok(self.0.unsqueeze(0)?)
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        Ok(self.0.flatten_all()?.to_vec1::<f64>()?)
    }

    pub fn detach(&self) -> Self {
        LatentTensor(self.0.detach())
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(self.to_vec()?.iter().all(|v| v.is_finite()))
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        let a = self.to_vec()?;
        let b = other.to_vec()?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
    }
}

/// Named parameters. Trainable stores hand out tracked tensors; frozen stores
/// hand out detached views so no gradient is ever accumulated into them.
#[derive(Debug)]
pub struct ParamStore {
    prefix: String,
    trainable: bool,
    params: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(prefix: impl Into<String>, trainable: bool) -> Self {
        ParamStore {
            prefix: prefix.into(),
            trainable,
            params: BTreeMap::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&t.to_dtype(DTYPE)?)?;
        let out = if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        };
        self.params.insert(self.full_name(name), var);
        Ok(out)
    }

    pub fn from_vec(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::from_vec(data, shape, &device())?;
        self.insert(name, t)
    }

    pub fn randn(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) -> Result<Tensor> {
        let n = shape.iter().product();
        let data = gaussian_vec(n, rng).into_iter().map(|v| v * std).collect();
        self.from_vec(name, data, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = Tensor::full(value, shape, &device())?;
        self.insert(name, t)
    }

    pub fn names(&self) -> Vec<String> {
        self.params.keys().cloned().collect()
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    pub fn get(&self, full_name: &str) -> Option<&Var> {
        self.params.get(full_name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names and values, in name order.
    pub fn checksum(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.params {
            h.update(name.as_bytes());
            for v in var.as_tensor().flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(format!("{:x}", h.finalize()))
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().detach()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrites every parameter from a safetensors archive; names and shapes must match.
    pub fn load(&self, path: &Path) -> Result<()> {
        let loaded = candle_core::safetensors::load(path, &device())?;
        self.assign_from(&loaded.into_iter().collect())
    }

    pub fn assign_from(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in &self.params {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::contract(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::contract(format!(
                    "parameter {name}: checkpoint shape {:?} vs model {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(DTYPE)?)?;
        }
        Ok(())
    }
}
