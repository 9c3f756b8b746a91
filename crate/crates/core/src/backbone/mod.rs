//! MobileNet-v1 style backbone: architecture description, weight store and
//! the layer-chain executor.
//!
//! The canonical stack is a 3×3 stride-2 convolution followed by 13
//! depthwise-separable blocks (3×3 depthwise + 1×1 pointwise, each followed
//! by batchnorm and ReLU6), global average pooling and a dense softmax head.
//! Every channel count is thinned by the width multiplier.

mod network;
mod weights;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use network::{Backward, Layer, LayerKind, Model, Network, Tape};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WeightStore, MAGIC, VERSION};

use crate::error::{Error, Result};
use crate::ops::Padding;
use crate::tensor::Tensor;

/// `(pointwise output channels, depthwise stride)` for each separable block.
pub const MOBILENET_V1_BLOCKS: [(usize, usize); 13] = [
    (64, 1),
    (128, 2),
    (128, 1),
    (256, 2),
    (256, 1),
    (512, 2),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (512, 1),
    (1024, 2),
    (1024, 1),
];

pub const STEM_CHANNELS: usize = 32;
pub const HEAD_LAYER: &str = "head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_size: usize,
    pub input_channels: usize,
    pub width_multiplier: f32,
    pub num_classes: usize,
    /// Batchnorm has been folded into the preceding convolutions.
    #[serde(default)]
    pub batchnorm_folded: bool,
    pub batchnorm_epsilon: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_size: 224,
            input_channels: 3,
            width_multiplier: 1.0,
            num_classes: 7,
            batchnorm_folded: false,
            batchnorm_epsilon: 1e-3,
        }
    }
}

impl ModelSpec {
    pub fn new(width_multiplier: f32, input_size: usize, num_classes: usize) -> Self {
        Self {
            input_size,
            width_multiplier,
            num_classes,
            ..Self::default()
        }
    }

    /// `max(1, round(α·c))`.
    pub fn channels(&self, base: usize) -> usize {
        ((self.width_multiplier as f64 * base as f64).round() as usize).max(1)
    }

    pub fn feature_len(&self) -> usize {
        self.channels(1024)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.width_multiplier;
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Config(format!("width multiplier must lie in (0, 1], got {a}")));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input channel count must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if !(self.batchnorm_epsilon > 0.0) {
            return Err(Error::Config("batchnorm epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_size, self.input_size, self.input_channels]
    }
}

/// Builds the layer chain for `spec`. Every backbone layer is frozen; the
/// dense head is the only trainable group.
pub fn build_model(spec: &ModelSpec) -> Result<Network> {
    spec.validate()?;
    let mut layers = Vec::new();
    let folded = spec.batchnorm_folded;
    let eps = spec.batchnorm_epsilon;
    let push_bn = |layers: &mut Vec<Layer>, name: String, channels: usize| {
        if !folded {
            layers.push(Layer::frozen(name, LayerKind::BatchNorm { channels, epsilon: eps }));
        }
        layers.push(Layer::frozen("", LayerKind::Relu6));
    };

    let stem = spec.channels(STEM_CHANNELS);
    layers.push(Layer::frozen(
        "conv1",
        LayerKind::Conv2d {
            kernel: [3, 3],
            in_channels: spec.input_channels,
            out_channels: stem,
            stride: 2,
            padding: Padding::Same,
            bias: folded,
        },
    ));
    push_bn(&mut layers, "conv1_bn".into(), stem);

    let mut channels = stem;
    for (i, &(base_out, stride)) in MOBILENET_V1_BLOCKS.iter().enumerate() {
        let id = i + 1;
        layers.push(Layer::frozen(
            format!("block{id}_dw"),
            LayerKind::Depthwise {
                kernel: [3, 3],
                channels,
                stride,
                padding: Padding::Same,
                bias: folded,
            },
        ));
        push_bn(&mut layers, format!("block{id}_dw_bn"), channels);
        let out = spec.channels(base_out);
        layers.push(Layer::frozen(
            format!("block{id}_pw"),
            LayerKind::Conv2d {
                kernel: [1, 1],
                in_channels: channels,
                out_channels: out,
                stride: 1,
                padding: Padding::Same,
                bias: folded,
            },
        ));
        push_bn(&mut layers, format!("block{id}_pw_bn"), out);
        channels = out;
    }
    layers.push(Layer::frozen("", LayerKind::GlobalAvgPool));
    layers.push(Layer::trainable(
        HEAD_LAYER,
        LayerKind::Dense {
            in_features: channels,
            out_features: spec.num_classes,
        },
    ));
    Network::new(spec.input_shape(), layers)
}

/// Seeded initialisation of every parameter `spec` demands.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<WeightStore> {
    Ok(build_model(spec)?.init_weights(seed))
}

/// Frozen-stack output (global average pool, before the head) for a batch.
pub fn extract_features(store: &WeightStore, spec: &ModelSpec, batch: &Tensor) -> Result<Tensor> {
    let network = build_model(spec)?;
    network.check_input(batch)?;
    network.features(store, batch)
}

/// Sets every batchnorm's running statistics from `batch` (see
/// [`Network::calibrate_batchnorm`]) and returns the updated store.
pub fn calibrate_batchnorm(store: &WeightStore, spec: &ModelSpec, batch: &Tensor) -> Result<WeightStore> {
    let network = build_model(spec)?;
    network.validate(store)?;
    let mut out = store.clone();
    network.calibrate_batchnorm(&mut out, batch)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleStats {
    pub weight_size_bytes: u64,
    pub load_time_seconds: f64,
}

/// Times a loader and pairs it with the on-disk size of `path`.
pub(crate) fn timed_load<T>(
    path: &std::path::Path,
    load: impl FnOnce() -> Result<T>,
) -> Result<(T, BundleStats)> {
    let start = Instant::now();
    let value = load()?;
    let elapsed = start.elapsed().as_secs_f64();
    let size = std::fs::metadata(path)
        .map_err(|e| Error::io(path, e))?
        .len();
    Ok((
        value,
        BundleStats {
            weight_size_bytes: size,
            load_time_seconds: elapsed,
        },
    ))
}
