//! Corpus ingestion, the stratified split, class-balance sampling and image
//! decoding.
//!
//! A corpus is a directory with one subdirectory per class:
//! `root/<class_name>/*.{jpg,jpeg,png}`. Classes are ordered alphabetically,
//! which fixes label indices and the order of `labels.txt`.

use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub path: PathBuf,
    #[serde(rename = "class")]
    pub class_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub items: Vec<Sample>,
    pub counts: Vec<usize>,
    /// Files ignored during the scan because they are not images.
    #[serde(default)]
    pub skipped_files: usize,
}

impl DatasetManifest {
    pub fn from_items(classes: Vec<String>, items: Vec<Sample>) -> Result<Self> {
        let mut counts = vec![0; classes.len()];
        for s in &items {
            *counts.get_mut(s.class_index).ok_or(Error::ClassIndex {
                index: s.class_index,
                bound: classes.len(),
            })? += 1;
        }
        Ok(Self {
            classes,
            items,
            counts,
            skipped_files: 0,
        })
    }

    /// A manifest of placeholder paths with the given per-class counts.
    /// Useful for planning splits without touching the filesystem.
    pub fn from_counts(classes: &[&str], counts: &[usize]) -> Result<Self> {
        if classes.len() != counts.len() {
            return Err(Error::Dataset("class and count lists differ in length".into()));
        }
        let items = classes
            .iter()
            .zip(counts)
            .enumerate()
            .flat_map(|(ci, (name, &n))| {
                (0..n).map(move |i| Sample {
                    path: PathBuf::from(format!("{name}/{i:05}.jpg")),
                    class_index: ci,
                })
            })
            .collect();
        Self::from_items(classes.iter().map(|s| s.to_string()).collect(), items)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total(&self) -> usize {
        self.items.len()
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(dir, e))?;
    entries.sort();
    Ok(entries)
}

pub fn scan_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if class_dirs.is_empty() {
        return Err(Error::Dataset(format!("{} contains no class directories", root.display())));
    }
    let mut classes = Vec::new();
    let mut items = Vec::new();
    let mut skipped = 0;
    for (ci, dir) in class_dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("class directory {} is not UTF-8", dir.display())))?
            .to_string();
        let before = items.len();
        for path in sorted_entries(dir)? {
            if path.is_file() && is_image(&path) {
                items.push(Sample {
                    path,
                    class_index: ci,
                });
            } else {
                skipped += 1;
            }
        }
        if items.len() == before {
            return Err(Error::Dataset(format!("class '{name}' has no images")));
        }
        classes.push(name);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} non-image entries under {}", root.display());
    }
    let mut manifest = DatasetManifest::from_items(classes, items)?;
    manifest.skipped_files = skipped;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationSource {
    /// Validation is a copy of the test selection.
    #[default]
    CopyOfTest,
    /// Validation is a seeded, test-sized selection drawn from train (overlaps train).
    FromTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub classes: Vec<String>,
    pub seed: u64,
    pub validation_source: ValidationSource,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub validation: Vec<Sample>,
}

/// Per-class sizes of a sample list.
pub fn class_counts(items: &[Sample], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for s in items {
        counts[s.class_index] += 1;
    }
    counts
}

fn by_class(items: &[Sample], num_classes: usize) -> Vec<Vec<Sample>> {
    let mut groups = vec![Vec::new(); num_classes];
    for s in items {
        groups[s.class_index].push(s.clone());
    }
    groups
}

impl SplitPlan {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        class_counts(&self.train, self.num_classes())
    }

    pub fn test_counts(&self) -> Vec<usize> {
        class_counts(&self.test, self.num_classes())
    }

    pub fn validation_counts(&self) -> Vec<usize> {
        class_counts(&self.validation, self.num_classes())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Round-half-up train size for a class of `n` items.
pub fn train_count(n: usize, train_fraction: f64) -> usize {
    let t = (train_fraction * n as f64 + 0.5 + 1e-9).floor() as usize;
    // Both sides must keep at least one item.
    t.clamp(1, n.saturating_sub(1))
}

pub fn stratified_split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
    validation_source: ValidationSource,
) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train fraction must lie in (0, 1), got {train_fraction}")));
    }
    let k = manifest.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = SplitPlan {
        classes: manifest.classes.clone(),
        seed,
        validation_source,
        train: Vec::new(),
        test: Vec::new(),
        validation: Vec::new(),
    };
    for (ci, mut group) in by_class(&manifest.items, k).into_iter().enumerate() {
        if group.len() < 2 {
            return Err(Error::Dataset(format!(
                "class '{}' has {} item(s); at least 2 are needed to split",
                manifest.classes[ci],
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        let n_train = train_count(group.len(), train_fraction);
        let test = group.split_off(n_train);
        let validation = match validation_source {
            ValidationSource::CopyOfTest => test.clone(),
            ValidationSource::FromTrain => {
                let take = test.len().min(group.len());
                let mut idx = index::sample(&mut rng, group.len(), take).into_vec();
                idx.sort_unstable();
                idx.into_iter().map(|i| group[i].clone()).collect()
            }
        };
        plan.train.extend(group);
        plan.test.extend(test);
        plan.validation.extend(validation);
    }
    Ok(plan)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Imbalanced,
    Undersample,
    Oversample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingOptions {
    /// Oversampling also balances the test (and validation) lists up to their
    /// largest class. Disable to keep evaluation on original images only.
    pub resample_test: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { resample_test: true }
    }
}

/// Keeps every original item and appends uniformly drawn duplicates until each
/// class reaches the largest class size.
fn oversample(items: &[Sample], k: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let groups = by_class(items, k);
    let target = groups.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::with_capacity(target * k);
    for mut group in groups {
        let n = group.len();
        if n > 0 {
            for _ in n..target {
                let pick = group[rng.gen_range(0..n)].clone();
                group.push(pick);
            }
        }
        out.extend(group);
    }
    out
}

fn undersample(items: &[Sample], k: usize, rng: &mut ChaCha8Rng) -> Vec<Sample> {
    let groups = by_class(items, k);
    let target = groups
        .iter()
        .map(Vec::len)
        .filter(|&n| n > 0)
        .min()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(target * k);
    for group in groups {
        if group.len() <= target {
            out.extend(group);
        } else {
            let mut idx = index::sample(rng, group.len(), target).into_vec();
            idx.sort_unstable();
            out.extend(idx.into_iter().map(|i| group[i].clone()));
        }
    }
    out
}

pub fn apply_sampling(plan: &SplitPlan, mode: SamplingMode, seed: u64, opts: SamplingOptions) -> SplitPlan {
    let k = plan.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = plan.clone();
    match mode {
        SamplingMode::Imbalanced => {}
        SamplingMode::Undersample => {
            out.train = undersample(&plan.train, k, &mut rng);
        }
        SamplingMode::Oversample => {
            out.train = oversample(&plan.train, k, &mut rng);
            if opts.resample_test {
                out.test = oversample(&plan.test, k, &mut rng);
                out.validation = match plan.validation_source {
                    ValidationSource::CopyOfTest => out.test.clone(),
                    ValidationSource::FromTrain => oversample(&plan.validation, k, &mut rng),
                };
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// How pixel values in `[0, 255]` are mapped before entering the network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Preprocessing {
    /// `x / 127.5 − 1`, range `[−1, 1]`.
    Default,
    /// `x · factor` (1/255 for the augmentation arm), range `[0, 1]`.
    Rescale { factor: f32 },
}

impl Preprocessing {
    pub fn rescale_unit() -> Self {
        Preprocessing::Rescale { factor: 1.0 / 255.0 }
    }

    pub fn apply(&self, img: &Tensor) -> Tensor {
        match *self {
            Preprocessing::Default => default_preprocess(img),
            Preprocessing::Rescale { factor } => rescale(img, factor),
        }
    }
}

pub fn default_preprocess(img: &Tensor) -> Tensor {
    img.map(|x| x / 127.5 - 1.0)
}

pub fn rescale(img: &Tensor, factor: f32) -> Tensor {
    img.map(|x| ((x as f64) * (factor as f64)) as f32)
}

/// Bilinear resize of an `H×W×C` image using half-pixel centres with edge
/// clamping. Same-size input is returned unchanged.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = match img.shape()[..] {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::Shape(format!("expected H×W×C image, got {:?}", img.shape()))),
    };
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Shape("cannot resize an empty image".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let axis = |o: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let x = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(ox, w, out_w);
            for ch in 0..c {
                let at = |y: usize, xx: usize| x[(y * w + xx) * c + ch] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

fn rgb_tensor(img: image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(f32::from).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data).expect("rgb buffer matches dimensions")
}

/// Decodes encoded image bytes to an RGB tensor resized to `target×target`,
/// values in `[0, 255]`.
pub fn decode_image(bytes: &[u8], target: usize, origin: &Path) -> Result<Tensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode {
        path: origin.to_path_buf(),
        reason: e.to_string(),
    })?;
    resize_bilinear(&rgb_tensor(img.to_rgb8()), target, target)
}

pub fn load_image(path: impl AsRef<Path>, target: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, target, path)
}

/// Loads images in parallel; results keep the input order.
pub fn load_images(paths: &[&Path], target: usize) -> Result<Vec<Tensor>> {
    paths.par_iter().map(|p| load_image(p, target)).collect()
}

/// Encodes an `H×W×3` tensor with values in `[0, 255]` as PNG.
pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match img.shape()[..] {
        [h, w, 3] => (h, w),
        _ => return Err(Error::Shape(format!("expected H×W×3 image, got {:?}", img.shape()))),
    };
    let raw: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| v.round().clamp(0.0, 255.0) as u8)
        .collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}
