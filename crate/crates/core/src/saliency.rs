//! Vanilla-gradient saliency: `|∂ logit_c / ∂ pixel|`, reduced over channels
//! and scaled so the largest value is 1.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduce {
    #[default]
    MaxAbs,
    MeanAbs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    /// Row-major `height × width`, each in [0, 1].
    pub values: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub class_index: usize,
    pub source_size: (usize, usize),
    /// Every gradient was zero; `values` are all zero.
    pub flat: bool,
}

impl SaliencyMap {
    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// Per-pixel reduction of an `H×W×C` gradient, before normalisation.
pub fn reduce_channels(grad: &Tensor, reduce: ChannelReduce) -> Result<Vec<f32>> {
    let &[h, w, c] = grad.shape() else {
        return Err(Error::Shape(format!("expected H×W×C gradient, got {:?}", grad.shape())));
    };
    Ok(grad
        .data()
        .chunks(c)
        .take(h * w)
        .map(|px| match reduce {
            ChannelReduce::MaxAbs => px.iter().fold(0.0f32, |m, v| m.max(v.abs())),
            ChannelReduce::MeanAbs => (px.iter().map(|v| v.abs() as f64).sum::<f64>() / c as f64) as f32,
        })
        .collect())
}

pub fn saliency(model: &Model, image: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    saliency_with(model, image, class_index, ChannelReduce::MaxAbs)
}

pub fn saliency_with(model: &Model, image: &Tensor, class_index: usize, reduce: ChannelReduce) -> Result<SaliencyMap> {
    let expected = model.network.input_shape();
    if image.shape() != expected {
        return Err(Error::Shape(format!(
            "saliency input {:?} does not match model input {:?}",
            image.shape(),
            expected
        )));
    }
    let grad = model.logit_input_gradient(image, class_index)?;
    let mut values = reduce_channels(&grad, reduce)?;
    let peak = values.iter().copied().fold(0.0f32, f32::max);
    let flat = peak == 0.0;
    if !flat {
        for v in &mut values {
            *v /= peak;
        }
    }
    Ok(SaliencyMap {
        values,
        height: expected[0],
        width: expected[1],
        class_index,
        source_size: (expected[0], expected[1]),
        flat,
    })
}

/// Jet-like ramp stops: dark blue → blue → cyan → yellow → red → dark red.
const RAMP: [(f32, [f32; 3]); 6] = [
    (0.0, [0.0, 0.0, 143.0]),
    (0.125, [0.0, 0.0, 255.0]),
    (0.375, [0.0, 255.0, 255.0]),
    (0.625, [255.0, 255.0, 0.0]),
    (0.875, [255.0, 0.0, 0.0]),
    (1.0, [128.0, 0.0, 0.0]),
];

pub fn ramp(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    for pair in RAMP.windows(2) {
        let ((a, ca), (b, cb)) = (pair[0], pair[1]);
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + (cb[i] - ca[i]) * t);
        }
    }
    RAMP[RAMP.len() - 1].1
}

/// Blends the ramp-coloured map over `base` (`H×W×3`, 0–255) and encodes PNG.
pub fn render_heatmap(map: &SaliencyMap, base: &Tensor, alpha: f32) -> Result<Vec<u8>> {
    let &[h, w, 3] = base.shape() else {
        return Err(Error::Shape(format!("base image must be H×W×3, got {:?}", base.shape())));
    };
    if (h, w) != (map.height, map.width) {
        return Err(Error::Shape(format!(
            "saliency map is {}×{}, base image is {h}×{w}",
            map.height, map.width
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha must lie in [0, 1], got {alpha}")));
    }
    let px = base.data();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let heat = ramp(map.values[i]);
        Rgb([0, 1, 2].map(|c| {
            let b = px[i * 3 + c];
            ((1.0 - alpha) * b + alpha * heat[c]).round().clamp(0.0, 255.0) as u8
        }))
    });
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}
