//! Small procedurally generated dataset: sky/grass scenes with one circle or
//! square, per-pixel segmentation, captions, synthetic (edge-derived) and
//! freehand-like (displaced, rescaled, wobbly) sketches.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::data::manifest::{DatasetManifest, ManifestEntry, SketchKind, Split};
use crate::data::synth::synthesize_sketch;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::stream_rng;

pub const TOY_VOCABULARY: [&str; 4] = ["sky", "grass", "circle", "square"];

const SKY: [f64; 3] = [0.55, 0.75, 0.95];
const GRASS: [f64; 3] = [0.25, 0.6, 0.25];
const RED: [f64; 3] = [0.7, 0.05, 0.05];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDatasetSpec {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            train_pairs: 16,
            test_pairs: 4,
            image_size: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Scene {
    horizon: f64,
    square: bool,
    cx: f64,
    cy: f64,
    radius: f64,
}

impl Scene {
    fn random(n: f64, r: &mut impl Rng) -> Self {
        let horizon = n * r.random_range(0.45..0.65);
        let radius = n * r.random_range(0.1..0.18);
        let in_sky = r.random_bool(0.5);
        let cy = if in_sky {
            r.random_range(radius + 1.0..(horizon - radius).max(radius + 2.0))
        } else {
            r.random_range((horizon + radius).min(n - radius - 2.0)..n - radius - 1.0)
        };
        Scene {
            horizon,
            square: r.random_bool(0.5),
            cx: r.random_range(radius + 1.0..n - radius - 1.0),
            cy,
            radius,
        }
    }

    fn in_object(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        if self.square {
            dx.abs() <= self.radius && dy.abs() <= self.radius
        } else {
            dx * dx + dy * dy <= self.radius * self.radius
        }
    }

    /// Vocabulary line (1-based) of each pixel.
    fn label(&self, x: f64, y: f64) -> u8 {
        if self.in_object(x, y) {
            if self.square {
                4
            } else {
                3
            }
        } else if y < self.horizon {
            1
        } else {
            2
        }
    }

    fn caption(&self) -> String {
        let shape = if self.square { "square" } else { "circle" };
        let place = if self.cy < self.horizon {
            "in the sky above"
        } else {
            "on"
        };
        format!("a red {shape} {place} the grass")
    }

    fn render(&self, n: usize) -> (Raster, Raster) {
        let mut img = Raster::filled(n, n, 3, 0.0);
        let mut seg = Raster::filled(n, n, 1, 0.0);
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let l = self.label(fx, fy);
                let c = match l {
                    1 => SKY,
                    2 => GRASS,
                    _ => RED,
                };
                for (ch, v) in c.iter().enumerate() {
                    img.set(x, y, ch, *v);
                }
                seg.set(x, y, 0, l as f64 / 255.0);
            }
        }
        (img, seg)
    }

    /// Outline drawing with displacement, rescaling and a wavy horizon.
    fn freehand(&self, n: usize, r: &mut impl Rng) -> Raster {
        let nf = n as f64;
        let shift = (r.random_range(-0.1..0.1) * nf, r.random_range(-0.1..0.1) * nf);
        let scale = r.random_range(0.8..1.2);
        let (amp, freq, phase) = (
            r.random_range(1.0..4.0),
            r.random_range(1.0..3.0),
            r.random_range(0.0..std::f64::consts::TAU),
        );
        let drawn = Scene {
            cx: self.cx + shift.0,
            cy: self.cy + shift.1,
            radius: self.radius * scale,
            ..*self
        };
        let mut out = Raster::filled(n, n, 1, 1.0);
        for y in 0..n {
            for x in 0..n {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let wave = self.horizon + amp * (freq * fx / nf * std::f64::consts::TAU + phase).sin();
                let on_horizon = (fy - wave).abs() < 1.0 && !drawn.in_object(fx, fy);
                let inside = drawn.in_object(fx, fy);
                let edge = inside
                    && [(-1.5, 0.0), (1.5, 0.0), (0.0, -1.5), (0.0, 1.5)]
                        .iter()
                        .any(|(dx, dy)| !drawn.in_object(fx + dx, fy + dy));
                if on_horizon || edge {
                    out.set(x, y, 0, 0.0);
                }
            }
        }
        out
    }
}

fn write(r: &Raster, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    r.save_png(path)
}

/// Writes the dataset under `dir` and returns the manifest path. Even indices
/// are freehand, odd ones synthetic.
pub fn generate_toy_dataset(dir: &Path, spec: &ToyDatasetSpec) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let n = spec.image_size;
    let vocab_path = dir.join("vocabulary.txt");
    std::fs::write(&vocab_path, TOY_VOCABULARY.join("\n") + "\n").map_err(|e| Error::io(&vocab_path, e))?;
    let mut entries = Vec::new();
    let splits = [
        (Split::Train, spec.train_pairs, "train"),
        (Split::Test, spec.test_pairs, "test"),
    ];
    for (split, count, tag) in splits {
        for i in 0..count {
            let mut r = stream_rng(spec.seed, ((split == Split::Test) as u64) << 32 | i as u64);
            let scene = Scene::random(n as f64, &mut r);
            let (img, seg) = scene.render(n);
            let freehand = i % 2 == 0;
            let sketch = if freehand {
                scene.freehand(n, &mut r)
            } else {
                synthesize_sketch(&img)
            };
            let stem = format!("{tag}_{i:02}");
            let (ip, sp, gp) = (
                format!("images/{stem}.png"),
                format!("sketches/{stem}.png"),
                format!("segmentation/{stem}.png"),
            );
            write(&img, &dir.join(&ip))?;
            write(&sketch, &dir.join(&sp))?;
            write(&seg, &dir.join(&gp))?;
            entries.push(ManifestEntry {
                sketch_path: sp,
                image_path: Some(ip),
                caption: scene.caption(),
                segmentation_path: Some(gp),
                split,
                kind: if freehand {
                    SketchKind::Freehand
                } else {
                    SketchKind::Synthetic
                },
            });
        }
    }
    let mut m = DatasetManifest::new(entries);
    m.vocabulary_path = Some("vocabulary.txt".into());
    let path = dir.join("manifest.json");
    m.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::load_manifest;

    #[test]
    fn generated_dataset_loads_and_is_deterministic() {
        let spec = ToyDatasetSpec {
            train_pairs: 4,
            test_pairs: 2,
            image_size: 32,
            seed: 1,
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let pa = generate_toy_dataset(a.path(), &spec).unwrap();
        let pb = generate_toy_dataset(b.path(), &spec).unwrap();
        let m = load_manifest(&pa).unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(m.entries.iter().filter(|e| e.kind == SketchKind::Freehand).count(), 3);
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        for e in &m.entries {
            let x = std::fs::read(m.resolve(&e.sketch_path)).unwrap();
            let y = std::fs::read(b.path().join(&e.sketch_path)).unwrap();
            assert_eq!(x, y);
            assert!(Raster::load(&m.resolve(&e.sketch_path)).unwrap().data.contains(&0.0));
        }
    }
}
