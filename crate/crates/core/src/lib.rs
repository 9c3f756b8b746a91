//! Skin-lesion classification on a MobileNet-v1 style backbone.
//!
//! The crate is organised as a pipeline:
//!
//! - [`tensor`] and [`ops`]: dense NHWC tensors and every layer primitive the
//!   network needs, forward and backward.
//! - [`backbone`]: the depthwise-separable architecture, the named weight
//!   store and its `MBWT` container format, and the layer-chain executor.
//! - [`data`]: class-per-directory corpus ingestion, the stratified 80/20
//!   split, under/over-sampling and image decode/resize/preprocess.
//! - [`augment`]: seeded affine augmentation (rotation, shift, shear, zoom,
//!   flip, nearest-edge fill).
//! - [`trainer`]: Adam, transfer-learning head training and the four-arm
//!   experiment harness.
//! - [`eval`]: confusion matrices and rank-1 accuracy.
//! - [`saliency`]: vanilla-gradient saliency maps and heatmap rendering.
//! - [`export`]: checkpoint → frozen bundle → batchnorm-folded bundle.
//! - [`synth`]: a small synthetic colored-texture corpus for desk-scale runs.

pub mod augment;
pub mod backbone;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod ops;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
