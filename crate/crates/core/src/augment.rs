//! Seeded affine augmentation for training images.
//!
//! A transform is sampled per image and composed as: horizontal flip, then
//! rotation·shear·zoom about the image centre, then translation. The output
//! is produced by inverse mapping with bilinear interpolation; source
//! coordinates outside the image are clamped to the nearest edge pixel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillMode {
    #[default]
    Nearest,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShearUnit {
    #[default]
    Radians,
    Degrees,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub rescale: f32,
    pub rotation_range_deg: f32,
    /// Fraction of the image width.
    pub width_shift_range: f32,
    /// Fraction of the image height.
    pub height_shift_range: f32,
    /// Shear angle bound, in `shear_unit`.
    pub shear_range: f32,
    pub shear_unit: ShearUnit,
    /// Zoom factor is drawn from `[1 − zoom_range, 1 + zoom_range]`.
    pub zoom_range: f32,
    pub horizontal_flip: bool,
    pub fill_mode: FillMode,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            rescale: 1.0 / 255.0,
            rotation_range_deg: 40.0,
            width_shift_range: 0.2,
            height_shift_range: 0.2,
            shear_range: 0.2,
            shear_unit: ShearUnit::Radians,
            zoom_range: 0.2,
            horizontal_flip: true,
            fill_mode: FillMode::Nearest,
        }
    }
}

impl AugmentationConfig {
    /// No geometric change; only the rescale is applied.
    pub fn rescale_only(rescale: f32) -> Self {
        Self {
            rescale,
            rotation_range_deg: 0.0,
            width_shift_range: 0.0,
            height_shift_range: 0.0,
            shear_range: 0.0,
            zoom_range: 0.0,
            horizontal_flip: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation_range_deg", self.rotation_range_deg),
            ("width_shift_range", self.width_shift_range),
            ("height_shift_range", self.height_shift_range),
            ("shear_range", self.shear_range),
            ("zoom_range", self.zoom_range),
        ];
        for (name, v) in ranges {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value ≥ 0, got {v}")));
            }
        }
        if self.zoom_range >= 1.0 {
            return Err(Error::Config("zoom_range must be below 1".into()));
        }
        if !(self.rescale > 0.0 && self.rescale.is_finite()) {
            return Err(Error::Config(format!("rescale must be positive, got {}", self.rescale)));
        }
        Ok(())
    }
}

/// One sampled geometric transform. Shifts are fractions of the image size so
/// the same transform applies to any resolution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub flip: bool,
    pub rotation_deg: f64,
    pub shear_rad: f64,
    pub zoom: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl AffineTransform {
    pub const IDENTITY: Self = Self {
        flip: false,
        rotation_deg: 0.0,
        shear_rad: 0.0,
        zoom: 1.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn flip() -> Self {
        Self {
            flip: true,
            ..Self::IDENTITY
        }
    }

    /// Translation by whole pixels on an image of the given size.
    pub fn shift_pixels(dx: f64, dy: f64, width: usize, height: usize) -> Self {
        Self {
            shift_x: dx / width as f64,
            shift_y: dy / height as f64,
            ..Self::IDENTITY
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    /// Forward 2×3 matrix mapping source pixel coordinates `(x, y)` to
    /// destination coordinates for a `width×height` image.
    pub fn matrix(&self, width: usize, height: usize) -> [[f64; 3]; 2] {
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        let (ssin, scos) = self.shear_rad.sin_cos();
        let rot = [[cos, -sin], [sin, cos]];
        let shear = [[1.0, -ssin], [0.0, scos]];
        let mut lin = mul2(&rot, &shear);
        for row in lin.iter_mut() {
            for v in row.iter_mut() {
                *v *= self.zoom;
            }
        }
        // Flip is x → 2·cx − x, i.e. negate the first column around the centre.
        if self.flip {
            lin[0][0] = -lin[0][0];
            lin[1][0] = -lin[1][0];
        }
        let tx = self.shift_x * width as f64;
        let ty = self.shift_y * height as f64;
        // p' = L·(p − c) + c + t
        [
            [lin[0][0], lin[0][1], cx - lin[0][0] * cx - lin[0][1] * cy + tx],
            [lin[1][0], lin[1][1], cy - lin[1][0] * cx - lin[1][1] * cy + ty],
        ]
    }

    /// Inverse of [`matrix`](Self::matrix): destination → source.
    pub fn inverse_matrix(&self, width: usize, height: usize) -> Result<[[f64; 3]; 2]> {
        let [[a, b, c], [d, e, f]] = self.matrix(width, height);
        let det = a * e - b * d;
        if det.abs() < 1e-12 {
            return Err(Error::Transform("transform is singular".into()));
        }
        let (ia, ib, id, ie) = (e / det, -b / det, -d / det, a / det);
        Ok([[ia, ib, -(ia * c + ib * f)], [id, ie, -(id * c + ie * f)]])
    }
}

fn mul2(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

fn symmetric(rng: &mut impl Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

pub fn sample_transform(config: &AugmentationConfig, rng: &mut impl Rng) -> AffineTransform {
    let rotation_deg = symmetric(rng, config.rotation_range_deg as f64);
    let shift_x = symmetric(rng, config.width_shift_range as f64);
    let shift_y = symmetric(rng, config.height_shift_range as f64);
    let shear = symmetric(rng, config.shear_range as f64);
    let shear_rad = match config.shear_unit {
        ShearUnit::Radians => shear,
        ShearUnit::Degrees => shear.to_radians(),
    };
    let zoom = 1.0 + symmetric(rng, config.zoom_range as f64);
    let flip = config.horizontal_flip && rng.gen_bool(0.5);
    AffineTransform {
        flip,
        rotation_deg,
        shear_rad,
        zoom,
        shift_x,
        shift_y,
    }
}

/// Resamples an `H×W×C` image through `t`.
pub fn apply_transform(img: &Tensor, t: &AffineTransform, fill: FillMode) -> Result<Tensor> {
    let (h, w, c) = match img.shape()[..] {
        [h, w, c] if h > 0 && w > 0 => (h, w, c),
        _ => return Err(Error::Shape(format!("expected a non-empty H×W×C image, got {:?}", img.shape()))),
    };
    if t.is_identity() {
        return Ok(img.clone());
    }
    let FillMode::Nearest = fill;
    let inv = t.inverse_matrix(w, h)?;
    let x = img.data();
    let mut out = Vec::with_capacity(img.len());
    for oy in 0..h {
        for ox in 0..w {
            let (fx, fy) = (ox as f64, oy as f64);
            let sx = (inv[0][0] * fx + inv[0][1] * fy + inv[0][2]).clamp(0.0, (w - 1) as f64);
            let sy = (inv[1][0] * fx + inv[1][1] * fy + inv[1][2]).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (ax, ay) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| x[(yy * w + xx) * c + ch] as f64;
                let (p00, p01, p10, p11) = (p(y0, x0), p(y0, x1), p(y1, x0), p(y1, x1));
                let v = (p00 * (1.0 - ax) + p01 * ax) * (1.0 - ay) + (p10 * (1.0 - ax) + p11 * ax) * ay;
                let lo = p00.min(p01).min(p10).min(p11);
                let hi = p00.max(p01).max(p10).max(p11);
                out.push(v.clamp(lo, hi) as f32);
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Samples a transform, applies it, then multiplies by `config.rescale`.
pub fn augment(img: &Tensor, config: &AugmentationConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let t = sample_transform(config, rng);
    let moved = apply_transform(img, &t, config.fill_mode)?;
    Ok(crate::data::rescale(&moved, config.rescale))
}

/// Per-item generator: `seed ⊕ item_index`, so parallel workers draw the
/// same transforms regardless of scheduling.
pub fn item_rng(seed: u64, item_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ item_index)
}

/// Decorrelated per-epoch seed derived from a base seed (SplitMix64 finaliser).
pub fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    let mut z = seed.wrapping_add(epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
