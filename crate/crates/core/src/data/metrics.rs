//! Fréchet distance, sketch/image cosine similarity, perceptual distance and
//! the aggregate report.

use candle_core::Tensor;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::raster::Raster;
use crate::sketch::{EncoderConfig, ToySketchEncoder};
use crate::tensor::{device, orthogonal, rng, DTYPE};

/// Eigenvalues down to this (relative) negative level are treated as zero.
pub const PSD_TOLERANCE: f64 = 1e-10;

fn check_symmetric(c: &DMatrix<f64>, what: &str) -> Result<()> {
    if !c.is_square() {
        return Err(Error::contract(format!("{what} is not square")));
    }
    let scale = c.amax().max(1.0);
    if (c - c.transpose()).amax() > 1e-9 * scale {
        return Err(Error::NumericDomain(format!("{what} is not symmetric")));
    }
    Ok(())
}

/// Eigen-decomposition of the symmetrized matrix with small negative
/// eigenvalues clipped; larger negative ones are a domain error.
fn psd_eigen(c: &DMatrix<f64>, what: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let sym = (c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut values = eig.eigenvalues.clone();
    for v in values.iter_mut() {
        if *v < 0.0 {
            if *v < -PSD_TOLERANCE * scale {
                return Err(Error::NumericDomain(format!(
                    "{what} is not positive semi-definite (eigenvalue {v:e})"
                )));
            }
            *v = 0.0;
        }
    }
    Ok((values, eig.eigenvectors))
}

/// Principal square root of a symmetric PSD matrix.
pub fn sqrt_psd(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_symmetric(c, "matrix")?;
    let (vals, vecs) = psd_eigen(c, "matrix")?;
    let d = DMatrix::from_diagonal(&vals.map(f64::sqrt));
    Ok(&vecs * d * vecs.transpose())
}

/// A square root `R` of `C1 C2` (`R R = C1 C2`) for invertible `C1`:
/// `C1^{1/2} (C1^{1/2} C2 C1^{1/2})^{1/2} C1^{-1/2}`.
pub fn product_sqrt(c1: &DMatrix<f64>, c2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s1 = sqrt_psd(c1)?;
    let m = &s1 * c2 * &s1;
    let sm = sqrt_psd(&((&m + m.transpose()) * 0.5))?;
    let inv = s1
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NumericDomain("C1 is singular".into()))?;
    Ok(&s1 * sm * inv)
}

/// `|mu1 - mu2|^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2})`, with the trace of the
/// square root taken as the sum of square-rooted eigenvalues of
/// `C1^{1/2} C2 C1^{1/2}`.
pub fn frechet_distance(mu1: &[f64], cov1: &DMatrix<f64>, mu2: &[f64], cov2: &DMatrix<f64>) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::contract(format!(
            "frechet inputs disagree: mu {} / {}, cov {:?} / {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    check_symmetric(cov1, "cov1")?;
    check_symmetric(cov2, "cov2")?;
    psd_eigen(cov2, "cov2")?;
    let s1 = sqrt_psd(cov1)?;
    let m = &s1 * cov2 * &s1;
    let (vals, _) = psd_eigen(&m, "C1^1/2 C2 C1^1/2")?;
    let tr_sqrt: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let mean_term: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let value = mean_term + cov1.trace() + cov2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Mean and unbiased covariance of row vectors.
pub fn mean_and_covariance(samples: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Estimation(format!(
            "covariance needs at least 2 samples, got {n}"
        )));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::contract("feature vectors differ in length"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| samples[i][j]);
    let mu: Vec<f64> = (0..d).map(|j| x.column(j).mean()).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mu, cov))
}

/// `scale * cos(a, b)`.
pub fn clip_similarity(sketch_embedding: &[f64], image_embedding: &[f64], scale: f64) -> Result<f64> {
    if sketch_embedding.len() != image_embedding.len() {
        return Err(Error::contract(format!(
            "embedding dimensions differ: {} vs {}",
            sketch_embedding.len(),
            image_embedding.len()
        )));
    }
    let na = sketch_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = image_embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("zero embedding vector".into()));
    }
    let dot: f64 = sketch_embedding.iter().zip(image_embedding).map(|(a, b)| a * b).sum();
    Ok(scale * dot / (na * nb))
}

/// Feature map in CHW order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Multi-layer feature provider for perceptual distance.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, image: &Raster) -> Result<Vec<FeatureMap>>;
}

/// Global embedding of an image (or a sketch).
pub trait ImageEmbedder: Send + Sync {
    fn embed(&self, image: &Raster) -> Result<Vec<f64>>;
}

/// Each spatial position's channel vector scaled to unit length (zero stays zero).
pub fn unit_normalize(f: &FeatureMap) -> FeatureMap {
    let hw = f.height * f.width;
    let mut data = f.data.clone();
    for p in 0..hw {
        let norm = (0..f.channels).map(|c| f.data[c * hw + p].powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for c in 0..f.channels {
                data[c * hw + p] /= norm;
            }
        }
    }
    FeatureMap { data, ..f.clone() }
}

/// Mean over layers of the mean squared difference of unit-normalized maps.
pub fn perceptual_distance(a: &Raster, b: &Raster, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::contract(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let fa = extractor.features(a)?;
    let fb = extractor.features(b)?;
    if fa.len() != fb.len() || fa.is_empty() {
        return Err(Error::contract("extractor returned inconsistent layer counts"));
    }
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let (x, y) = (unit_normalize(x), unit_normalize(y));
        let sq: f64 = x.data.iter().zip(&y.data).map(|(p, q)| (p - q).powi(2)).sum();
        total += sq / x.data.len() as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Fixed random convolutional features: three stages of 3x3 convolution,
/// tanh and 2x average pooling over the RGB image.
#[derive(Debug, Clone)]
pub struct ToyFeatureExtractor {
    /// Per stage: weight `(c_out, c_in, 3, 3)` flattened, and `c_out`.
    stages: Vec<(Vec<f64>, usize, usize)>,
}

impl ToyFeatureExtractor {
    pub const WIDTHS: [usize; 3] = [8, 16, 16];

    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed ^ 0x1f5e_a7e5);
        let mut c_in = 3;
        let mut stages = Vec::new();
        for &c_out in &Self::WIDTHS {
            let fan_in = c_in * 9;
            let w: Vec<f64> = orthogonal(c_out, fan_in, &mut r)
                .into_iter()
                .map(|v| v * (fan_in as f64 / c_out as f64).sqrt().max(1.0))
                .collect();
            stages.push((w, c_in, c_out));
            c_in = c_out;
        }
        ToyFeatureExtractor { stages }
    }

    /// Stage weights as `(weights, c_in, c_out)`.
    pub fn stage_weights(&self) -> &[(Vec<f64>, usize, usize)] {
        &self.stages
    }

    /// Pre-pooling activations of every stage.
    fn run(&self, image: &Raster) -> Result<Vec<FeatureMap>> {
        let rgb = image.to_rgb();
        let (w, h) = (rgb.width, rgb.height);
        let chw: Vec<f64> = (0..3)
            .flat_map(|c| (0..h * w).map(move |p| (c, p)))
            .map(|(c, p)| rgb.data[p * 3 + c] * 2.0 - 1.0)
            .collect();
        let mut x = Tensor::from_vec(chw, (1, 3, h, w), &device())?;
        let mut out = Vec::new();
        for (i, (wt, c_in, c_out)) in self.stages.iter().enumerate() {
            if i > 0 {
                let (_, _, hh, ww) = x.dims4()?;
                if hh < 2 || ww < 2 {
                    break;
                }
                x = x.avg_pool2d(2)?;
            }
            let k = Tensor::from_vec(wt.clone(), (*c_out, *c_in, 3, 3), &device())?.to_dtype(DTYPE)?;
            x = x.conv2d(&k, 1, 1, 1, 1)?.tanh()?;
            let (_, c, hh, ww) = x.dims4()?;
            out.push(FeatureMap {
                channels: c,
                height: hh,
                width: ww,
                data: x.flatten_all()?.to_vec1()?,
            });
        }
        Ok(out)
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn features(&self, image: &Raster) -> Result<Vec<FeatureMap>> {
        self.run(image)
    }
}

impl ImageEmbedder for ToyFeatureExtractor {
    /// Spatial mean of every stage, concatenated.
    fn embed(&self, image: &Raster) -> Result<Vec<f64>> {
        Ok(self
            .run(image)?
            .iter()
            .flat_map(|f| {
                let hw = f.height * f.width;
                (0..f.channels).map(move |c| f.data[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
            })
            .collect())
    }
}

/// Pooled frozen-reference sketch-encoder features; applied to sketches and to
/// photographs alike so both land in one space.
pub struct EncoderEmbedder<'a>(pub &'a ToySketchEncoder);

impl ImageEmbedder for EncoderEmbedder<'_> {
    fn embed(&self, image: &Raster) -> Result<Vec<f64>> {
        let cfg = EncoderConfig {
            trainable_suffix_layers: self.0.config().trainable_suffix_layers,
            frozen_reference: true,
        };
        self.0.encode_sketch(image, &cfg)?.pooled()
    }
}

/// Injected models used by [`evaluate`].
pub struct Extractors<'a> {
    pub fid: &'a dyn ImageEmbedder,
    pub perceptual: &'a dyn FeatureExtractor,
    pub sketch: &'a dyn ImageEmbedder,
    pub image: &'a dyn ImageEmbedder,
    /// Similarity scaling constant `K`.
    pub clip_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub clip_sim: f64,
    pub lpips: f64,
    pub n_samples: usize,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Plain-text table, columns FID (lower is better), CLIP (higher), LPIPS (lower).
    pub fn to_table(&self, method: &str) -> String {
        let head = format!(
            "{:<16} {:>12} {:>10} {:>10} {:>6}",
            "Method", "FID↓", "CLIP↑", "LPIPS↓", "n"
        );
        let row = format!(
            "{:<16} {:>12.3} {:>10.3} {:>10.3} {:>6}",
            method, self.fid, self.clip_sim, self.lpips, self.n_samples
        );
        format!("{head}\n{row}\n")
    }
}

/// FID between generated and reference sets, mean scaled cosine between each
/// sketch and its generated image, mean perceptual distance between
/// generated/reference pairs.
pub fn evaluate(
    generated: &[Raster],
    references: &[Raster],
    sketches: &[Raster],
    extractors: &Extractors<'_>,
    exec: Execution,
) -> Result<MetricReport> {
    if generated.len() < 2 || references.len() < 2 {
        return Err(Error::Estimation(format!(
            "need at least 2 generated and 2 reference images (got {} and {})",
            generated.len(),
            references.len()
        )));
    }
    if sketches.len() != generated.len() || references.len() != generated.len() {
        return Err(Error::contract(format!(
            "set sizes differ: {} generated, {} references, {} sketches",
            generated.len(),
            references.len(),
            sketches.len()
        )));
    }
    let gen_emb = exec.try_map(generated, |g| extractors.fid.embed(g))?;
    let ref_emb = exec.try_map(references, |r| extractors.fid.embed(r))?;
    let (mu_g, cov_g) = mean_and_covariance(&gen_emb)?;
    let (mu_r, cov_r) = mean_and_covariance(&ref_emb)?;
    let fid = frechet_distance(&mu_g, &cov_g, &mu_r, &cov_r)?;

    let idx: Vec<usize> = (0..generated.len()).collect();
    let sims = exec.try_map(&idx, |&i| {
        let s = extractors.sketch.embed(&sketches[i])?;
        let g = extractors.image.embed(&generated[i])?;
        clip_similarity(&s, &g, extractors.clip_scale)
    })?;
    let dists = exec.try_map(&idx, |&i| {
        perceptual_distance(&generated[i], &references[i], extractors.perceptual)
    })?;
    let n = generated.len() as f64;
    Ok(MetricReport {
        fid,
        clip_sim: sims.iter().sum::<f64>() / n,
        lpips: dists.iter().sum::<f64>() / n,
        n_samples: generated.len(),
    })
}
