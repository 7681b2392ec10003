//! Sketch semantics: the sketch encoder, ground-truth attention masks from
//! encoder/text similarity or dataset segmentation, and the fine-tuning suffix.

mod encoder;
mod export;
mod masks;

pub use encoder::{EncoderConfig, ParameterSelection, SketchEncoderConfig, SketchFeatureGrid, ToySketchEncoder};
pub use export::{export_mask_set, MaskIndexEntry};
pub use masks::{
    associate_tokens, cosine, derive_masks, derive_masks_with, masks_from_segmentation, LabelMap, LabelQuery, Mask,
    MaskSource, SemanticMaskSet, DEFAULT_MASK_THRESHOLD,
};

use std::path::Path;

use crate::error::{Error, Result};

/// Reads a newline-delimited UTF-8 label vocabulary; blank lines are skipped.
pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_vocabulary(&text))
}

pub fn parse_vocabulary(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect()
}
