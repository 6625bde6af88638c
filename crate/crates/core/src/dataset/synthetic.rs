//! Synthetic four-class quadrant dataset for smoke tests and demos.
//!
//! Class `c` brightens quadrant `c` (0 top-left, 1 top-right, 2 bottom-left,
//! 3 bottom-right) on a noisy darker background, so the classes are
//! separable by quadrant means by construction.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{sample_id, SampleRecord};
use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::preprocess::{write_pgm, FloatImage, GrayImage};
use crate::tensor::RngState;

fn in_quadrant(class: usize, x: usize, y: usize, w: usize, h: usize) -> bool {
    let right = x >= w / 2;
    let bottom = y >= h / 2;
    match class {
        0 => !right && !bottom,
        1 => right && !bottom,
        2 => !right && bottom,
        _ => right && bottom,
    }
}

/// One `size x size` float pattern image in `[0, 1]`.
pub fn quadrant_image(class: usize, size: usize, noise: f64, rng: &mut RngState) -> FloatImage {
    let bg = rng.uniform(0.1, 0.3);
    let fg = rng.uniform(0.6, 0.9);
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let base = if in_quadrant(class, x, y, size, size) { fg } else { bg };
            pixels.push((base + noise * rng.normal()).clamp(0.0, 1.0) as f32);
        }
    }
    FloatImage::new(size, size, pixels).expect("positive size")
}

/// `n_per_class` samples per class, classes interleaved, ids `s000000...`.
pub fn quadrant_samples(n_per_class: usize, size: usize, noise: f64, seed: u64) -> Vec<SampleRecord> {
    let mut rng = RngState::new(seed);
    (0..n_per_class * NUM_CLASSES)
        .map(|i| {
            let class = i % NUM_CLASSES;
            SampleRecord {
                id: sample_id(i),
                label: ClassLabel::from_index(class).expect("class index"),
                image: quadrant_image(class, size, noise, &mut rng),
                fold: None,
            }
        })
        .collect()
}

/// Writes `n_per_class * 4` PGM radiograph stand-ins plus a
/// `manifest.jsonl` into `dir`, returning the manifest path. Each image has
/// one annotation box; the class pattern is drawn inside it and unrelated
/// clutter outside it.
pub fn write_quadrant_dataset(dir: &Path, n_per_class: usize, width: usize, height: usize, seed: u64) -> Result<PathBuf> {
    if width < 16 || height < 16 {
        return Err(Error::Param("synthetic radiographs must be at least 16x16".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = RngState::new(seed);
    let mut manifest = String::new();
    for i in 0..n_per_class * NUM_CLASSES {
        let class = i % NUM_CLASSES;
        let bw = width / 2 + rng.below(width / 4);
        let bh = height / 2 + rng.below(height / 4);
        let bx = rng.below(width - bw + 1);
        let by = rng.below(height - bh + 1);
        let clutter = rng.uniform(40.0, 90.0);
        let bg = rng.uniform(50.0, 80.0);
        let fg = rng.uniform(150.0, 200.0);
        let mut px = vec![0u8; width * height];
        for y in 0..height {
            for x in 0..width {
                let inside = x >= bx && x < bx + bw && y >= by && y < by + bh;
                let v = if inside {
                    let lit = in_quadrant(class, x - bx, y - by, bw, bh);
                    (if lit { fg } else { bg }) + 12.0 * rng.normal()
                } else {
                    clutter + 25.0 * rng.normal()
                };
                px[y * width + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        // sparse salt-and-pepper
        for _ in 0..(width * height / 200) {
            let p = rng.below(width * height);
            px[p] = if rng.next_f64() < 0.5 { 0 } else { 255 };
        }
        let name = format!("img_{i:05}.pgm");
        write_pgm(&dir.join(&name), &GrayImage::new(width, height, px)?)?;
        let label = ClassLabel::from_index(class).expect("class index");
        writeln!(
            manifest,
            "{{\"image\":\"{name}\",\"x\":{bx},\"y\":{by},\"w\":{bw},\"h\":{bh},\"label\":\"{label}\"}}"
        )
        .expect("string write");
    }
    let path = dir.join("manifest.jsonl");
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{class_counts, load_manifest, materialize};
    use crate::preprocess::PipelineParams;

    #[test]
    fn samples_are_balanced_and_seeded() {
        let a = quadrant_samples(5, 8, 0.05, 3);
        assert_eq!(class_counts(&a), [5; 4]);
        assert_eq!(a, quadrant_samples(5, 8, 0.05, 3));
    }

    #[test]
    fn written_dataset_loads_and_preprocesses() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_quadrant_dataset(dir.path(), 2, 40, 32, 5).unwrap();
        let load = load_manifest(&manifest).unwrap();
        assert_eq!(load.annotations.len(), 8);
        assert!(load.warnings.is_empty());
        let params = PipelineParams {
            output_size: 24,
            ..PipelineParams::default()
        };
        let samples = materialize(&load.annotations, &params).unwrap();
        assert_eq!(samples.len(), 8);
        assert!(samples.iter().all(|s| s.image.width() == 24 && s.image.pixels().iter().all(|v| (0.0..=1.0).contains(v))));
    }
}
