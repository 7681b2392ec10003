use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::sketch::{MaskSource, SemanticMaskSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskIndexEntry {
    pub page: usize,
    pub token_index: usize,
    pub label: String,
    pub source: MaskSource,
    pub empty: bool,
}

/// Writes `<stem>.png`, a lossless stack of one `h x w` page per token laid
/// out top to bottom (white = inside), and `<stem>.json`, the page index.
pub fn export_mask_set(set: &SemanticMaskSet, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = set.resolution().unwrap_or((1, 1));
    let pages = set.masks.len().max(1);
    let mut stack = Raster::filled(w, h * pages, 1, 0.0);
    let mut index = Vec::with_capacity(set.masks.len());
    for (page, (&token, mask)) in set.masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                stack.set(x, page * h + y, 0, mask.get(y, x) as f64);
            }
        }
        index.push(MaskIndexEntry {
            page,
            token_index: token,
            label: set.token_labels.get(&token).cloned().unwrap_or_default(),
            source: set.source,
            empty: mask.is_empty(),
        });
    }
    let png = dir.join(format!("{stem}.png"));
    let json = dir.join(format!("{stem}.json"));
    stack.save_png(&png)?;
    let body = serde_json::json!({ "height": h, "width": w, "pages": index });
    std::fs::write(&json, serde_json::to_vec_pretty(&body)?).map_err(|e| Error::io(&json, e))?;
    Ok((png, json))
}
