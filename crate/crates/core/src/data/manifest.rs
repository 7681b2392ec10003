use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SketchKind {
    Freehand,
    Synthetic,
}

/// Paths are relative to the manifest's directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sketch_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub caption: String,
    /// Grayscale PNG whose 8-bit value `v > 0` names vocabulary line `v`
    /// (1-based); 0 is unlabeled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation_path: Option<String>,
    pub split: Split,
    pub kind: SketchKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocabulary_path: Option<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            vocabulary_path: None,
            entries,
            base_dir: PathBuf::from("."),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &ManifestEntry)> {
        self.entries.iter().enumerate().filter(move |(_, e)| e.split == split)
    }

    /// Schema-level and filesystem checks; errors name the offending entry.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported schema_version {} (expected {MANIFEST_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(v) = &self.vocabulary_path {
            let p = self.resolve(v);
            if !p.is_file() {
                return Err(Error::Manifest(format!(
                    "vocabulary_path does not exist: {}",
                    p.display()
                )));
            }
        }
        let mut train = BTreeSet::new();
        let mut test = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.caption.trim().is_empty() {
                return Err(Error::Manifest(format!("entry {i}: caption is empty")));
            }
            if e.kind == SketchKind::Synthetic && e.image_path.is_none() {
                return Err(Error::Manifest(format!("entry {i}: synthetic entry has no image_path")));
            }
            let paths = [
                Some(&e.sketch_path),
                e.image_path.as_ref(),
                e.segmentation_path.as_ref(),
            ];
            for (field, p) in ["sketch_path", "image_path", "segmentation_path"].iter().zip(paths) {
                if let Some(p) = p {
                    let full = self.resolve(p);
                    if !full.is_file() {
                        return Err(Error::Manifest(format!(
                            "entry {i}: {field} does not exist: {}",
                            full.display()
                        )));
                    }
                }
            }
            match e.split {
                Split::Train => train.insert(e.sketch_path.clone()),
                Split::Test => test.insert(e.sketch_path.clone()),
            };
        }
        if let Some(p) = train.intersection(&test).next() {
            return Err(Error::Manifest(format!(
                "sketch {p} appears in both train and test splits"
            )));
        }
        Ok(())
    }

    /// Canonical form: fixed key order, two-space indentation, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?).map_err(|e| Error::io(path, e))
    }
}

/// Parses and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(Error::Manifest(format!("manifest not found: {}", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = parse_manifest(&text)?;
    m.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    m.validate()?;
    Ok(m)
}

/// Schema parse only (no filesystem checks); entry errors cite the index.
pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Manifest(format!("invalid JSON: {e}")))?;
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Manifest("manifest must be a JSON object".into()))?;
    for key in obj.keys() {
        if !["schema_version", "vocabulary_path", "entries"].contains(&key.as_str()) {
            return Err(Error::Manifest(format!("unknown top-level field {key:?}")));
        }
    }
    let schema_version =
        obj.get("schema_version")
            .and_then(|s| s.as_u64())
            .ok_or_else(|| Error::Manifest("missing or non-integer schema_version".into()))? as u32;
    let vocabulary_path = match obj.get("vocabulary_path") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(Error::Manifest("vocabulary_path must be a string".into())),
    };
    let raw = obj
        .get("entries")
        .and_then(|e| e.as_array())
        .ok_or_else(|| Error::Manifest("missing entries array".into()))?;
    let entries = raw
        .iter()
        .enumerate()
        .map(|(i, e)| {
            serde_json::from_value::<ManifestEntry>(e.clone())
                .map_err(|err| Error::Manifest(format!("entry {i}: {err}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetManifest {
        schema_version,
        vocabulary_path,
        entries,
        base_dir: PathBuf::from("."),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    fn entry(sketch: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            sketch_path: sketch.into(),
            image_path: Some("img.png".into()),
            caption: "a cat".into(),
            segmentation_path: None,
            split,
            kind: SketchKind::Synthetic,
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(&p, r#"{"schema_version": 1, "entries": []}"#).unwrap();
        assert!(load_manifest(&p).unwrap().entries.is_empty());
    }

    #[test]
    fn missing_caption_cites_index() {
        let text = r#"{"schema_version": 1, "entries": [
            {"sketch_path": "a.png", "image_path": "i.png", "caption": "x", "split": "train", "kind": "synthetic"},
            {"sketch_path": "b.png", "image_path": "i.png", "split": "train", "kind": "synthetic"}]}"#;
        let err = parse_manifest(text).unwrap_err().to_string();
        assert!(err.contains("entry 1") && err.contains("caption"), "{err}");
    }

    #[test]
    fn canonical_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["s1.png", "s2.png", "img.png"] {
            touch(dir.path(), f);
        }
        let m = DatasetManifest::new(vec![entry("s1.png", Split::Train), entry("s2.png", Split::Test)]);
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let first = std::fs::read(&p).unwrap();
        load_manifest(&p).unwrap().save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }

    #[test]
    fn integrity_errors() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "s1.png");
        touch(dir.path(), "img.png");
        let mut m = DatasetManifest::new(vec![entry("s1.png", Split::Train), entry("s1.png", Split::Test)]);
        m.base_dir = dir.path().to_path_buf();
        assert!(m.validate().unwrap_err().to_string().contains("both train and test"));
        let mut m = DatasetManifest::new(vec![entry("missing.png", Split::Train)]);
        m.base_dir = dir.path().to_path_buf();
        assert!(m.validate().unwrap_err().to_string().contains("entry 0"));
        let mut e = entry("s1.png", Split::Train);
        e.image_path = None;
        let mut m = DatasetManifest::new(vec![e]);
        m.base_dir = dir.path().to_path_buf();
        assert!(m.validate().is_err());
        let err = load_manifest(&dir.path().join("nope.json")).unwrap_err().to_string();
        assert!(err.contains("manifest not found"));
    }
}
