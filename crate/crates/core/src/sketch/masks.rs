use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::tokenize;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::sketch::SketchFeatureGrid;

/// Binary `h x w` region, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width || bits.iter().any(|&b| b > 1) {
            return Err(Error::contract(format!(
                "mask needs {} bits in {{0,1}}, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Bitwise `self <= other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(a, b)| a <= b)
    }

    /// Resamples to `height x width`. Each target cell takes the majority vote
    /// (ties go to 1) of the source cells its footprint overlaps. For integer
    /// downsampling this is block majority; for integer upsampling it
    /// replicates; equal sizes return the mask unchanged.
    pub fn resample(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let span = |i: usize, src: usize, dst: usize| {
            let start = i * src / dst;
            let end = ((i + 1) * src).div_ceil(dst);
            start..end.max(start + 1)
        };
        let mut out = Mask::zeros(height, width);
        for ty in 0..height {
            let ys = span(ty, self.height, height);
            for tx in 0..width {
                let xs = span(tx, self.width, width);
                let mut ones = 0;
                let mut total = 0;
                for y in ys.clone() {
                    for x in xs.clone() {
                        ones += self.get(y, x) as usize;
                        total += 1;
                    }
                }
                out.bits[ty * width + tx] = (2 * ones >= total) as u8;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    EncoderSimilarity,
    DatasetSegmentation,
}

/// Per-token binary regions that supervise cross-attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMaskSet {
    pub masks: BTreeMap<usize, Mask>,
    pub token_labels: BTreeMap<usize, String>,
    pub source: MaskSource,
    /// Tokens whose label produced no region at all.
    pub empty_tokens: BTreeSet<usize>,
}

impl SemanticMaskSet {
    pub fn new(
        masks: BTreeMap<usize, Mask>,
        token_labels: BTreeMap<usize, String>,
        source: MaskSource,
    ) -> Result<Self> {
        let mut dims = masks.values().map(|m| (m.height, m.width));
        if let Some(first) = dims.next() {
            if dims.any(|d| d != first) {
                return Err(Error::contract("all masks in a set must share one resolution"));
            }
        }
        if let Some(t) = masks.keys().find(|t| !token_labels.contains_key(t)) {
            return Err(Error::contract(format!("mask for token {t} has no label")));
        }
        let empty_tokens = masks.iter().filter(|(_, m)| m.is_empty()).map(|(&t, _)| t).collect();
        Ok(SemanticMaskSet {
            masks,
            token_labels,
            source,
            empty_tokens,
        })
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.masks.values().next().map(|m| (m.height, m.width))
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn resample(&self, height: usize, width: usize) -> SemanticMaskSet {
        let masks: BTreeMap<usize, Mask> = self
            .masks
            .iter()
            .map(|(&t, m)| (t, m.resample(height, width)))
            .collect();
        let empty_tokens = masks.iter().filter(|(_, m)| m.is_empty()).map(|(&t, _)| t).collect();
        SemanticMaskSet {
            masks,
            token_labels: self.token_labels.clone(),
            source: self.source,
            empty_tokens,
        }
    }
}

/// An object label to look for in the sketch, tied to the caption token it supervises.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelQuery {
    pub token_index: usize,
    pub label: String,
    pub embedding: Vec<f64>,
}

/// Cosine similarity with the zero-norm convention: similarity 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

/// Marks patch `p` for label `i` when `cos(grid[:, p], embedding_i) >= threshold`.
pub fn derive_masks(grid: &SketchFeatureGrid, labels: &[LabelQuery], threshold: f64) -> Result<SemanticMaskSet> {
    derive_masks_with(Execution::default(), grid, labels, threshold)
}

pub fn derive_masks_with(
    exec: Execution,
    grid: &SketchFeatureGrid,
    labels: &[LabelQuery],
    threshold: f64,
) -> Result<SemanticMaskSet> {
    if !(threshold > -1.0 && threshold < 1.0) {
        return Err(Error::range("threshold", threshold, "(-1, 1)"));
    }
    let (c, h, w) = grid.shape();
    for q in labels {
        if q.embedding.len() != c {
            return Err(Error::contract(format!(
                "label {:?} embedding has dim {}, sketch features have {c}",
                q.label,
                q.embedding.len()
            )));
        }
    }
    let patches = grid.patch_vectors()?;
    let rows: Vec<Vec<u8>> = exec.map(labels, |q| {
        patches
            .iter()
            .map(|p| (cosine(p, &q.embedding) >= threshold) as u8)
            .collect()
    });
    let mut masks = BTreeMap::new();
    let mut token_labels = BTreeMap::new();
    for (q, bits) in labels.iter().zip(rows) {
        let m = Mask {
            height: h,
            width: w,
            bits,
        };
        masks
            .entry(q.token_index)
            .and_modify(|e: &mut Mask| e.bits.iter_mut().zip(&m.bits).for_each(|(a, b)| *a |= b))
            .or_insert(m);
        token_labels.entry(q.token_index).or_insert_with(|| q.label.clone());
    }
    SemanticMaskSet::new(masks, token_labels, MaskSource::EncoderSimilarity)
}

/// Integer label per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

/// Per-token indicator maps from a segmentation, resampled to `target_hw` by
/// block majority. Labels that never occur give empty masks, reported in
/// `empty_tokens`.
pub fn masks_from_segmentation(
    segmentation: &LabelMap,
    label_to_token: &BTreeMap<u32, (usize, String)>,
    target_hw: (usize, usize),
) -> Result<SemanticMaskSet> {
    let mut masks: BTreeMap<usize, Mask> = BTreeMap::new();
    let mut token_labels = BTreeMap::new();
    for (&label, (token, name)) in label_to_token {
        let bits = segmentation.labels.iter().map(|&l| (l == label) as u8).collect();
        let full = Mask {
            height: segmentation.height,
            width: segmentation.width,
            bits,
        };
        let m = full.resample(target_hw.0, target_hw.1);
        masks
            .entry(*token)
            .and_modify(|e| e.bits.iter_mut().zip(&m.bits).for_each(|(a, b)| *a |= b))
            .or_insert(m);
        token_labels.entry(*token).or_insert_with(|| name.clone());
    }
    SemanticMaskSet::new(masks, token_labels, MaskSource::DatasetSegmentation)
}

/// Associates vocabulary labels with caption tokens by exact match of the
/// label's words; a multi-word label binds to its first word's index. Each
/// token binds at most one label (first in vocabulary order).
pub fn associate_tokens(token_labels: &[String], vocabulary: &[String]) -> Vec<(usize, String)> {
    let mut taken = BTreeSet::new();
    let mut out = Vec::new();
    for label in vocabulary {
        let words = tokenize(label);
        if words.is_empty() || words.len() > token_labels.len() {
            continue;
        }
        let hit = (0..=token_labels.len() - words.len())
            .find(|&p| token_labels[p..p + words.len()].iter().zip(&words).all(|(a, b)| a == b));
        if let Some(p) = hit {
            if taken.insert(p) {
                out.push((p, label.clone()));
            }
        }
    }
    out.sort();
    out
}
