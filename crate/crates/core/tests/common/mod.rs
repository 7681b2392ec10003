//! Independent scalar oracles and fixtures shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sketchmod::config::RunConfig;
use sketchmod::data::{generate_toy_dataset, load_manifest, load_samples, Split, ToyDatasetSpec};
use sketchmod::modnet::ModulationMaps;
use sketchmod::pipeline::{Components, TrainingSample};
use sketchmod::probe::AttentionMapSet;
use sketchmod::sketch::{Mask, MaskSource, SemanticMaskSet};
use sketchmod::tensor::{rng, LatentTensor};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    rng(seed)
}

pub fn uniform_vec(n: usize, lo: f64, hi: f64, r: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn latent(shape: (usize, usize, usize), r: &mut impl Rng) -> LatentTensor {
    LatentTensor::from_vec(uniform_vec(shape.0 * shape.1 * shape.2, -2.0, 2.0, r), shape).unwrap()
}

pub fn maps(shape: (usize, usize, usize), r: &mut impl Rng) -> ModulationMaps {
    ModulationMaps {
        scale: latent(shape, r),
        shift: latent(shape, r),
        t: 0,
    }
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ---- scalar oracles -------------------------------------------------------

pub fn modulate_oracle(eps: &[f64], s: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; eps.len()];
    for i in 0..eps.len() {
        out[i] = eps[i] * (1.0 + s[i]) + b[i];
    }
    out
}

pub fn noise_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc / a.len() as f64
}

pub fn l1_oracle(x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in x {
        acc += v.abs();
    }
    acc
}

/// Two-pass population standard deviation.
pub fn std_oracle(x: &[f64]) -> f64 {
    let mut mean = 0.0;
    for v in x {
        mean += v;
    }
    mean /= x.len() as f64;
    let mut ss = 0.0;
    for v in x {
        ss += (v - mean) * (v - mean);
    }
    (ss / x.len() as f64).sqrt()
}

pub fn variance_oracle(s: &[f64], b: &[f64]) -> f64 {
    -(std_oracle(s) + std_oracle(b))
}

/// One attention layer in plain form: row-major `(P, L)` map plus masks.
#[derive(Debug, Clone)]
pub struct PlainLayer {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub tokens: usize,
    pub map: Vec<f64>,
    pub masks: BTreeMap<usize, Vec<u8>>,
}

/// Loop over layers, supervised tokens and pixels.
pub fn attention_oracle(layers: &[PlainLayer], lambda_reg: f64) -> f64 {
    let mut total = 0.0;
    for layer in layers {
        for (&tok, bits) in &layer.masks {
            if bits.iter().all(|&b| b == 0) {
                continue;
            }
            let mut inside = 0.0;
            let mut mass = 0.0;
            for p in 0..layer.h * layer.w {
                let v = layer.map[p * layer.tokens + tok];
                mass += v;
                if bits[p] == 1 {
                    inside += v;
                }
            }
            if mass == 0.0 {
                continue;
            }
            let ratio = inside / mass;
            total += 1.0 - ratio * ratio - lambda_reg * inside;
        }
    }
    total
}

pub fn softmax_rows(logits: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row_in, row_out) in logits.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row_in.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row_in.iter().map(|v| (v - m).exp()).sum();
        for (o, v) in row_out.iter_mut().zip(row_in) {
            *o = (v - m).exp() / z;
        }
    }
    out
}

/// Random layers with row-stochastic maps and random (possibly empty) masks.
pub fn random_layers(r: &mut impl Rng, n_layers: usize, tokens: usize) -> Vec<PlainLayer> {
    (0..n_layers)
        .map(|k| {
            let side = [2usize, 4, 8][k % 3];
            let p = side * side;
            let map = softmax_rows(&uniform_vec(p * tokens, -3.0, 3.0, r), tokens);
            let mut masks = BTreeMap::new();
            for tok in 0..tokens {
                if r.random_bool(0.8) {
                    masks.insert(tok, (0..p).map(|_| r.random_bool(0.4) as u8).collect());
                }
            }
            PlainLayer {
                id: format!("xattn_{side}x{side}_{k}"),
                h: side,
                w: side,
                tokens,
                map,
                masks,
            }
        })
        .collect()
}

pub fn to_library(layers: &[PlainLayer]) -> (AttentionMapSet, BTreeMap<String, SemanticMaskSet>) {
    let mut maps = BTreeMap::new();
    let mut res = BTreeMap::new();
    let mut sets = BTreeMap::new();
    for l in layers {
        let t = Tensor::from_vec(l.map.clone(), (l.h * l.w, l.tokens), &Device::Cpu).unwrap();
        maps.insert(l.id.clone(), t);
        res.insert(l.id.clone(), (l.h, l.w));
        let masks: BTreeMap<usize, Mask> = l
            .masks
            .iter()
            .map(|(&t, bits)| (t, Mask::from_bits(l.h, l.w, bits.clone()).unwrap()))
            .collect();
        let labels = masks.keys().map(|&t| (t, format!("tok{t}"))).collect();
        sets.insert(
            l.id.clone(),
            SemanticMaskSet::new(masks, labels, MaskSource::EncoderSimilarity).unwrap(),
        );
    }
    (AttentionMapSet::new(maps, res).unwrap(), sets)
}

// ---- fixtures ---------------------------------------------------------------

/// Small but complete run config: 64 px images, 16x16 latents.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.backbone.image_size = 64;
    cfg.backbone.attention_resolutions = vec![4, 8, 16];
    cfg.probe.resolutions = vec![4, 8, 16];
    cfg.validate().unwrap();
    cfg
}

pub struct Dataset {
    pub dir: tempfile::TempDir,
    pub manifest: std::path::PathBuf,
}

pub fn toy_dataset(train_pairs: usize, test_pairs: usize, image_size: usize, seed: u64) -> Dataset {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_toy_dataset(
        dir.path(),
        &ToyDatasetSpec {
            train_pairs,
            test_pairs,
            image_size,
            seed,
        },
    )
    .unwrap();
    Dataset { dir, manifest }
}

pub fn training_samples(ds: &Dataset, components: &Components) -> Vec<TrainingSample> {
    let m = load_manifest(&ds.manifest).unwrap();
    load_samples(&m, Split::Train, components).unwrap()
}

pub fn arcs(samples: Vec<TrainingSample>) -> Vec<Arc<TrainingSample>> {
    samples.into_iter().map(Arc::new).collect()
}
