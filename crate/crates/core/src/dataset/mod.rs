//! Annotation manifests, sample materialisation, class balancing and
//! stratified fold assignment.

mod cache;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Deserialize;

use crate::archive::write_atomic;
use crate::error::{Error, Result};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::preprocess::{self, BBox, FloatImage, PipelineParams};
use crate::tensor::RngState;

pub use cache::{decode_sample, encode_sample, read_sample, write_sample, SAMPLE_MAGIC, SAMPLE_VERSION};

/// RNG stream tags. Every randomised step derives its own stream from the
/// run seed so that changing one step never perturbs another.
pub(crate) mod streams {
    pub const BALANCE: u64 = 1;
    pub const FOLDS: u64 = 2;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub image_path: PathBuf,
    pub bbox: BBox,
    pub label: ClassLabel,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestLoad {
    pub annotations: Vec<Annotation>,
    /// One entry per record whose box had to be clamped.
    pub warnings: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image: String,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    label: String,
    /// Optional image size; when absent the image header is read.
    width: Option<usize>,
    height: Option<usize>,
}

/// Loads a line-delimited JSON manifest.
///
/// Each non-blank line is an object with `image`, `x`, `y`, `w`, `h` and
/// `label`. Image paths are resolved relative to the manifest's directory.
/// Boxes are clamped to the image bounds; each clamp adds a warning.
pub fn load_manifest(path: &Path) -> Result<ManifestLoad> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut dims_cache: HashMap<PathBuf, (usize, usize)> = HashMap::new();
    let mut out = ManifestLoad::default();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let label: ClassLabel = rec
            .label
            .parse()
            .map_err(|_| Error::Validation(format!("{}:{line_no}: unknown label {:?}", path.display(), rec.label)))?;
        let image_path = base.join(&rec.image);
        let (width, height) = match (rec.width, rec.height) {
            (Some(w), Some(h)) => (w, h),
            _ => match dims_cache.get(&image_path) {
                Some(&d) => d,
                None => {
                    let d = preprocess::image_dimensions(&image_path)?;
                    dims_cache.insert(image_path.clone(), d);
                    d
                }
            },
        };
        let (bbox, clamped) = BBox::clamp_to(rec.x, rec.y, rec.w, rec.h, width, height).ok_or_else(|| {
            Error::Validation(format!(
                "{}:{line_no}: box ({}, {}, {}, {}) lies outside the {width}x{height} image",
                path.display(),
                rec.x,
                rec.y,
                rec.w,
                rec.h
            ))
        })?;
        if clamped {
            out.warnings.push(format!(
                "line {line_no}: box ({}, {}, {}, {}) clamped to ({}, {}, {}, {}) for {width}x{height} image",
                rec.x, rec.y, rec.w, rec.h, bbox.x, bbox.y, bbox.w, bbox.h
            ));
        }
        out.annotations.push(Annotation {
            image_path,
            bbox,
            label,
        });
    }
    Ok(out)
}

/// Anything with a stable id and a class label.
pub trait Labeled {
    fn id(&self) -> &str;
    fn label(&self) -> ClassLabel;
}

/// A materialised training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub label: ClassLabel,
    pub image: FloatImage,
    pub fold: Option<usize>,
}

impl Labeled for SampleRecord {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&self) -> ClassLabel {
        self.label
    }
}

/// Id/label pair without pixel data.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub id: String,
    pub label: ClassLabel,
}

impl Labeled for SampleRef {
    fn id(&self) -> &str {
        &self.id
    }

    fn label(&self) -> ClassLabel {
        self.label
    }
}

/// Stable id of the annotation at manifest position `index`.
pub fn sample_id(index: usize) -> String {
    format!("s{index:06}")
}

/// Runs the preprocessing pipeline for every annotation. Each source image is
/// decoded once; samples come back in manifest order.
pub fn materialize(annotations: &[Annotation], params: &PipelineParams) -> Result<Vec<SampleRecord>> {
    let mut by_image: Vec<(&Path, Vec<usize>)> = Vec::new();
    let mut slot: HashMap<&Path, usize> = HashMap::new();
    for (i, a) in annotations.iter().enumerate() {
        let k = *slot.entry(a.image_path.as_path()).or_insert_with(|| {
            by_image.push((a.image_path.as_path(), Vec::new()));
            by_image.len() - 1
        });
        by_image[k].1.push(i);
    }
    let groups: Vec<Vec<(usize, FloatImage)>> = by_image
        .par_iter()
        .map(|(path, idxs)| {
            let img = preprocess::read_gray(path)?;
            idxs.iter()
                .map(|&i| Ok((i, preprocess::run_pipeline(&img, annotations[i].bbox, params)?)))
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<SampleRecord>> = vec![None; annotations.len()];
    for (i, image) in groups.into_iter().flatten() {
        out[i] = Some(SampleRecord {
            id: sample_id(i),
            label: annotations[i].label,
            image,
            fold: None,
        });
    }
    Ok(out.into_iter().map(|s| s.expect("every annotation materialised")).collect())
}

pub fn class_counts<S: Labeled>(samples: &[S]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for s in samples {
        counts[s.label().index()] += 1;
    }
    counts
}

/// Randomly downsamples every class to the size of the smallest one.
///
/// Survivors keep their input order. The draw is uniform without
/// replacement and depends only on `seed` and the per-class membership.
pub fn balance_downsample<S: Labeled + Clone>(samples: &[S], seed: u64) -> Result<Vec<S>> {
    let counts = class_counts(samples);
    if let Some(c) = ClassLabel::ALL.iter().find(|c| counts[c.index()] == 0) {
        return Err(Error::Validation(format!("class {c} has no samples; cannot balance")));
    }
    let target = *counts.iter().min().expect("four classes");
    let mut rng = RngState::derive(seed, streams::BALANCE);
    let mut keep = vec![false; samples.len()];
    for class in ClassLabel::ALL {
        let members: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label() == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() == target {
            members.iter().for_each(|&i| keep[i] = true);
        } else {
            for pick in rand::seq::index::sample(&mut rng, members.len(), target) {
                keep[members[pick]] = true;
            }
        }
    }
    Ok(samples
        .iter()
        .zip(keep)
        .filter_map(|(s, k)| k.then(|| s.clone()))
        .collect())
}

/// Assignment of sample ids to `k` folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// `(id, fold)` in the order the samples were given.
    pub assignments: Vec<(String, usize)>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignments.iter().find(|(i, _)| i == id).map(|&(_, f)| f)
    }

    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.assignments.iter().map(|(i, f)| (i.as_str(), *f)).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &(_, f) in &self.assignments {
            sizes[f] += 1;
        }
        sizes
    }

    /// Plain-text form: a `# k=<k> seed=<seed>` comment, an `id,fold` header
    /// and one row per sample.
    pub fn to_text(&self) -> String {
        let mut s = format!("# k={} seed={}\nid,fold\n", self.k, self.seed);
        for (id, f) in &self.assignments {
            s.push_str(&format!("{id},{f}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut k = None;
        let mut seed = 0;
        let mut assignments = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(meta) = line.strip_prefix('#') {
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("k", v)) => k = Some(v.parse().map_err(|_| err(idx + 1, format!("bad k {v:?}")))?),
                        Some(("seed", v)) => seed = v.parse().map_err(|_| err(idx + 1, format!("bad seed {v:?}")))?,
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() || line == "id,fold" {
                continue;
            }
            let (id, fold) = line.split_once(',').ok_or_else(|| err(idx + 1, "expected id,fold".into()))?;
            let fold: usize = fold.trim().parse().map_err(|_| err(idx + 1, format!("bad fold {fold:?}")))?;
            assignments.push((id.trim().to_string(), fold));
        }
        let k = k.unwrap_or_else(|| assignments.iter().map(|&(_, f)| f + 1).max().unwrap_or(0));
        if let Some((id, f)) = assignments.iter().find(|&&(_, f)| f >= k) {
            return Err(Error::Validation(format!("{}: sample {id} assigned to fold {f} >= k={k}", path.display())));
        }
        Ok(FoldPlan { k, seed, assignments })
    }
}

/// Stratified k-fold assignment.
///
/// Within each class (in class order) the members are shuffled with the
/// seeded stream and dealt round-robin. The dealing position carries over
/// from one class to the next, so remainders spread across folds instead of
/// piling onto the first ones.
pub fn kfold_split<S: Labeled>(samples: &[S], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Param(format!("k-fold needs k >= 2, got {k}")));
    }
    if k > samples.len() {
        return Err(Error::Param(format!("k={k} exceeds the {} available samples", samples.len())));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = samples.iter().find(|s| !seen.insert(s.id())) {
        return Err(Error::Validation(format!("duplicate sample id {}", dup.id())));
    }
    let mut rng = RngState::derive(seed, streams::FOLDS);
    let mut fold = vec![0usize; samples.len()];
    let mut next = 0usize;
    for class in ClassLabel::ALL {
        let mut members: Vec<usize> = samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label() == class)
            .map(|(i, _)| i)
            .collect();
        rand::seq::SliceRandom::shuffle(members.as_mut_slice(), &mut rng);
        for i in members {
            fold[i] = next % k;
            next += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments: samples.iter().zip(fold).map(|(s, f)| (s.id().to_string(), f)).collect(),
    })
}
