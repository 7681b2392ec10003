//! Dataset manifests, the synthetic-sketch generator, a toy dataset and the
//! evaluation metrics.

mod manifest;
mod metrics;
mod synth;
mod toy;

pub use manifest::{
    load_manifest, parse_manifest, DatasetManifest, ManifestEntry, SketchKind, Split, MANIFEST_SCHEMA_VERSION,
};
pub use metrics::{
    clip_similarity, evaluate, frechet_distance, mean_and_covariance, perceptual_distance, product_sqrt, sqrt_psd,
    unit_normalize, EncoderEmbedder, Extractors, FeatureExtractor, FeatureMap, ImageEmbedder, MetricReport,
    ToyFeatureExtractor, PSD_TOLERANCE,
};
pub use synth::{synthesize_sketch, synthesize_sketch_with, EDGE_THRESHOLD};
pub use toy::{generate_toy_dataset, ToyDatasetSpec, TOY_VOCABULARY};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pipeline::{Components, TrainingSample};
use crate::raster::Raster;
use crate::sketch::{associate_tokens, load_vocabulary, masks_from_segmentation, LabelMap};

/// Reads a segmentation PNG; the 8-bit value of the first channel is the label.
pub fn load_label_map(path: &std::path::Path) -> Result<LabelMap> {
    let r = Raster::load(path)?;
    Ok(LabelMap {
        width: r.width,
        height: r.height,
        labels: (0..r.width * r.height)
            .map(|p| (r.data[p * r.channels] * 255.0).round() as u32)
            .collect(),
    })
}

/// Materializes the entries of one split as training samples: images are
/// resized to the backbone resolution, masks come from the segmentation when
/// present and from sketch/label similarity otherwise.
pub fn load_samples(manifest: &DatasetManifest, split: Split, components: &Components) -> Result<Vec<TrainingSample>> {
    let vocabulary = match &manifest.vocabulary_path {
        Some(v) => Some(load_vocabulary(&manifest.resolve(v))?),
        None => None,
    };
    let (iw, ih) = components.backbone.image_size();
    let finest = components.config.probe.resolutions.iter().copied().max().unwrap_or(1);
    let entries: Vec<(usize, &ManifestEntry)> = manifest.split(split).collect();
    components.config.execution.try_map(&entries, |&(i, e)| {
        let image_path = e
            .image_path
            .as_ref()
            .ok_or_else(|| Error::Manifest(format!("entry {i}: training needs a (reference) image_path")))?;
        let image = Raster::load(&manifest.resolve(image_path))?
            .to_rgb()
            .resize_nearest(iw, ih);
        let sketch = Raster::load(&manifest.resolve(&e.sketch_path))?;
        let masks = match &e.segmentation_path {
            Some(seg_path) => {
                let vocab = vocabulary.as_ref().ok_or_else(|| {
                    Error::Manifest(format!("entry {i}: segmentation needs a manifest vocabulary_path"))
                })?;
                let seg = load_label_map(&manifest.resolve(seg_path))?;
                let cond = components.backbone.encode_text(&e.caption)?;
                let label_to_token: BTreeMap<u32, (usize, String)> = associate_tokens(&cond.token_labels, vocab)
                    .into_iter()
                    .filter_map(|(tok, label)| {
                        vocab
                            .iter()
                            .position(|v| *v == label)
                            .map(|p| (p as u32 + 1, (tok, label)))
                    })
                    .collect();
                masks_from_segmentation(&seg, &label_to_token, (finest, finest))?
            }
            None => components.sketch_masks(
                &sketch,
                &e.caption,
                vocabulary.as_deref(),
                components.config.masks.threshold,
            )?,
        };
        Ok(TrainingSample {
            id: e.sketch_path.clone(),
            sketch,
            image,
            caption: e.caption.clone(),
            masks,
            is_freehand: e.kind == SketchKind::Freehand,
        })
    })
}
