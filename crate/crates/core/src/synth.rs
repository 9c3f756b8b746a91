//! Seeded colored-texture corpus in the class-per-directory layout that
//! `data::scan_dataset` ingests. Each class has its own palette and pattern;
//! every image jitters phase, frequency, brightness and pixel noise.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{self, DatasetManifest};
use crate::error::{Error, Result};

/// Disease classes in alphabetical (label-index) order.
pub const DISEASE_CLASSES: [&str; 7] = [
    "acne",
    "eczema",
    "pityriasis_rosea",
    "psoriasis",
    "tinea_corporis",
    "varicella",
    "vitiligo",
];

/// Base colour per class; each has a distinct chromaticity.
const PALETTE: [[f64; 3]; 7] = [
    [215.0, 50.0, 50.0],
    [220.0, 210.0, 60.0],
    [210.0, 60.0, 200.0],
    [170.0, 170.0, 170.0],
    [60.0, 200.0, 210.0],
    [60.0, 200.0, 60.0],
    [60.0, 70.0, 215.0],
];

/// Pattern strength: the accent (a darker shade of the base) blends in at
/// most this much.
const CONTRAST: f64 = 0.2;
const NOISE: f64 = 3.0;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    pub images_per_class: usize,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: DISEASE_CLASSES.iter().map(|s| s.to_string()).collect(),
            images_per_class: 200,
            size: 32,
            seed: 0,
        }
    }
}

/// Pattern intensity in [0, 1] at pixel (x, y) for the class's texture.
fn pattern(kind: usize, x: f64, y: f64, freq: f64, phase: f64, size: f64) -> f64 {
    use std::f64::consts::TAU;
    let (u, v) = (x / size, y / size);
    match kind % 7 {
        0 => 0.5 + 0.5 * (TAU * freq * v + phase).sin(),
        1 => {
            let cx = ((u * freq * 2.0 + phase).floor() as i64) & 1;
            let cy = ((v * freq * 2.0 + phase).floor() as i64) & 1;
            (cx ^ cy) as f64
        }
        2 => {
            let r = ((u - 0.5).powi(2) + (v - 0.5).powi(2)).sqrt();
            0.5 + 0.5 * (TAU * freq * 2.0 * r + phase).cos()
        }
        3 => {
            let fu = (u * freq * 2.0 + phase).fract() - 0.5;
            let fv = (v * freq * 2.0 + phase).fract() - 0.5;
            if fu * fu + fv * fv < 0.09 {
                1.0
            } else {
                0.0
            }
        }
        4 => 0.5 + 0.5 * (TAU * freq * (u + v) + phase).sin(),
        5 => 0.5 + 0.25 * ((TAU * freq * u + phase).sin() + (TAU * freq * 1.7 * v - phase).cos()),
        _ => (u + v) / 2.0,
    }
}

/// One image of class `class_index`, drawn from `rng`.
pub fn render_texture(class_index: usize, size: u32, rng: &mut impl Rng) -> RgbImage {
    let base = PALETTE[class_index % PALETTE.len()];
    let accent = base.map(|c| c * 0.6);
    let freq = rng.gen_range(1.5..3.0);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let brightness = rng.gen_range(0.95..1.05);
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.gen_range(-NOISE..NOISE)).collect();
    let s = size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let t = pattern(class_index, x as f64, y as f64, freq, phase, s);
        let idx = ((y * size + x) * 3) as usize;
        let px = |c: usize| {
            let t = t * CONTRAST;
            let v = (base[c] * (1.0 - t) + accent[c] * t) * brightness + noise[idx + c];
            v.round().clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    })
}

/// Writes `root/<class>/<nnnnn>.png` for every class and returns the scanned
/// manifest.
pub fn generate_corpus(root: impl AsRef<Path>, cfg: &SynthConfig) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if cfg.classes.is_empty() || cfg.images_per_class == 0 || cfg.size == 0 {
        return Err(Error::Config("synthetic corpus needs classes, images and a size".into()));
    }
    let jobs: Vec<(usize, usize)> = (0..cfg.classes.len())
        .flat_map(|c| (0..cfg.images_per_class).map(move |i| (c, i)))
        .collect();
    for class in &cfg.classes {
        let dir = root.join(class);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    jobs.par_iter().try_for_each(|&(c, i)| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((c as u64) << 32 | i as u64));
        let img = render_texture(c, cfg.size, &mut rng);
        let path = root.join(&cfg.classes[c]).join(format!("{i:05}.png"));
        img.save(&path).map_err(Error::from)
    })?;
    data::scan_dataset(root)
}
