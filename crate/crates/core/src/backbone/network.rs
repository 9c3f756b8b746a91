//! Static layer chains with a recorded forward tape.
//!
//! The architecture is a straight chain, so backpropagation walks the tape in
//! reverse; no general graph autograd is needed.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::weights::WeightStore;
use crate::error::{shape_err, Error, Result};
use crate::ops::{self, BatchNormParams, ConvParams, Padding};
use crate::tensor::Tensor;


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    Depthwise {
        kernel: [usize; 2],
        channels: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        epsilon: f32,
    },
    Relu6,
    GlobalAvgPool,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub trainable: bool,
}

impl Layer {
    pub fn frozen(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            trainable: false,
        }
    }

    pub fn trainable(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            trainable: true,
        }
    }

    pub fn param(&self, suffix: &str) -> String {
        format!("{}/{suffix}", self.name)
    }

    /// Parameter names and shapes owned by this layer.
    pub fn params(&self) -> Vec<(String, Vec<usize>)> {
        match self.kind {
            LayerKind::Conv2d {
                kernel: [kh, kw],
                in_channels,
                out_channels,
                bias,
                ..
            } => {
                let mut p = vec![(self.param("kernel"), vec![kh, kw, in_channels, out_channels])];
                if bias {
                    p.push((self.param("bias"), vec![out_channels]));
                }
                p
            }
            LayerKind::Depthwise {
                kernel: [kh, kw],
                channels,
                bias,
                ..
            } => {
                let mut p = vec![(self.param("kernel"), vec![kh, kw, channels, 1])];
                if bias {
                    p.push((self.param("bias"), vec![channels]));
                }
                p
            }
            LayerKind::BatchNorm { channels, .. } => ["gamma", "beta", "moving_mean", "moving_variance"]
                .iter()
                .map(|s| (self.param(s), vec![channels]))
                .collect(),
            LayerKind::Dense {
                in_features,
                out_features,
            } => vec![
                (self.param("kernel"), vec![in_features, out_features]),
                (self.param("bias"), vec![out_features]),
            ],
            LayerKind::Relu6 | LayerKind::GlobalAvgPool | LayerKind::Flatten => Vec::new(),
        }
    }

    pub fn conv_params(&self, store: &WeightStore) -> Result<ConvParams> {
        let (stride, padding, bias) = match self.kind {
            LayerKind::Conv2d {
                stride,
                padding,
                bias,
                ..
            }
            | LayerKind::Depthwise {
                stride,
                padding,
                bias,
                ..
            } => (stride, padding, bias),
            _ => return Err(shape_err!("layer {} is not a convolution", self.name)),
        };
        let mut p = ConvParams::new(store.require(&self.param("kernel"))?.clone(), stride, padding);
        if bias {
            p.bias = Some(store.require(&self.param("bias"))?.clone());
        }
        Ok(p)
    }

    pub fn bn_params(&self, store: &WeightStore) -> Result<BatchNormParams> {
        let LayerKind::BatchNorm { epsilon, .. } = self.kind else {
            return Err(shape_err!("layer {} is not batchnorm", self.name));
        };
        Ok(BatchNormParams {
            gamma: store.require(&self.param("gamma"))?.clone(),
            beta: store.require(&self.param("beta"))?.clone(),
            running_mean: store.require(&self.param("moving_mean"))?.clone(),
            running_var: store.require(&self.param("moving_variance"))?.clone(),
            epsilon,
        })
    }

    fn forward(&self, store: &WeightStore, x: &Tensor) -> Result<Tensor> {
        match &self.kind {
            LayerKind::Conv2d { .. } => ops::conv2d(x, &self.conv_params(store)?),
            LayerKind::Depthwise { .. } => ops::depthwise_conv2d(x, &self.conv_params(store)?),
            LayerKind::BatchNorm { .. } => ops::batchnorm_infer(x, &self.bn_params(store)?),
            LayerKind::Relu6 => Ok(ops::relu6(x)),
            LayerKind::GlobalAvgPool => ops::global_avg_pool(x),
            LayerKind::Flatten => {
                let n = x.shape()[0];
                x.clone().reshape(&[n, x.len() / n.max(1)])
            }
            LayerKind::Dense { .. } => ops::dense(
                x,
                store.require(&self.param("kernel"))?,
                store.require(&self.param("bias"))?,
            ),
        }
    }

    /// Returns the input gradient, and parameter gradients when `with_params`.
    fn backward(
        &self,
        store: &WeightStore,
        x: &Tensor,
        grad: &Tensor,
        with_params: bool,
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut params = Vec::new();
        let gx = match &self.kind {
            LayerKind::Conv2d { .. } | LayerKind::Depthwise { .. } => {
                let p = self.conv_params(store)?;
                let g = if matches!(self.kind, LayerKind::Conv2d { .. }) {
                    ops::conv2d_backward(x, &p, grad)?
                } else {
                    ops::depthwise_conv2d_backward(x, &p, grad)?
                };
                if with_params {
                    params.push((self.param("kernel"), g.kernel));
                    if let Some(b) = g.bias {
                        params.push((self.param("bias"), b));
                    }
                }
                g.input
            }
            LayerKind::BatchNorm { .. } => {
                let g = ops::batchnorm_backward(x, &self.bn_params(store)?, grad)?;
                if with_params {
                    params.push((self.param("gamma"), g.gamma));
                    params.push((self.param("beta"), g.beta));
                    params.push((self.param("moving_mean"), g.running_mean));
                    params.push((self.param("moving_variance"), g.running_var));
                }
                g.input
            }
            LayerKind::Relu6 => ops::relu6_backward(x, grad)?,
            LayerKind::GlobalAvgPool => ops::global_avg_pool_backward(x.shape(), grad)?,
            LayerKind::Flatten => grad.clone().reshape(x.shape())?,
            LayerKind::Dense { .. } => {
                let g = ops::dense_backward(x, store.require(&self.param("kernel"))?, grad)?;
                if with_params {
                    params.push((self.param("kernel"), g.weights));
                    params.push((self.param("bias"), g.bias));
                }
                g.input
            }
        };
        Ok((gx, params))
    }

    /// Per-sample output shape for a per-sample input shape.
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |what: &str| shape_err!("layer {} expects {what}, got input {:?}", self.name, input);
        match (&self.kind, input) {
            (
                LayerKind::Conv2d {
                    kernel: [kh, kw],
                    in_channels,
                    out_channels,
                    stride,
                    padding,
                    ..
                },
                &[h, w, c],
            ) => {
                if c != *in_channels {
                    return Err(mismatch(&format!("{in_channels} channels")));
                }
                let (oh, _) = ops::output_extent(h, *kh, *stride, *padding)?;
                let (ow, _) = ops::output_extent(w, *kw, *stride, *padding)?;
                Ok(vec![oh, ow, *out_channels])
            }
            (
                LayerKind::Depthwise {
                    kernel: [kh, kw],
                    channels,
                    stride,
                    padding,
                    ..
                },
                &[h, w, c],
            ) => {
                if c != *channels {
                    return Err(mismatch(&format!("{channels} channels")));
                }
                let (oh, _) = ops::output_extent(h, *kh, *stride, *padding)?;
                let (ow, _) = ops::output_extent(w, *kw, *stride, *padding)?;
                Ok(vec![oh, ow, c])
            }
            (LayerKind::BatchNorm { channels, .. }, s) => {
                if s.last() != Some(channels) {
                    return Err(mismatch(&format!("{channels} channels")));
                }
                Ok(s.to_vec())
            }
            (LayerKind::Relu6, s) => Ok(s.to_vec()),
            (LayerKind::GlobalAvgPool, &[_, _, c]) => Ok(vec![c]),
            (LayerKind::Flatten, s) => Ok(vec![s.iter().product()]),
            (LayerKind::Dense { in_features, out_features }, &[f]) => {
                if f != *in_features {
                    return Err(mismatch(&format!("{in_features} features")));
                }
                Ok(vec![*out_features])
            }
            _ => Err(mismatch("a different rank")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_shape: [usize; 3],
    layers: Vec<Layer>,
}

/// Inputs to every layer of one forward pass, plus the final output.
#[derive(Clone, Debug)]
pub struct Tape {
    pub inputs: Vec<Tensor>,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct Backward {
    pub input: Tensor,
    pub params: BTreeMap<String, Tensor>,
}

impl Network {
    /// Validates that the chain is shape-consistent for `input_shape` (H×W×C).
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for layer in &layers {
            shape = layer.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(shape_err!("network must end in a flat output, ends in {:?}", shape));
        }
        Ok(Self { input_shape, layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_outputs(&self) -> usize {
        let mut shape = self.input_shape.to_vec();
        for layer in &self.layers {
            shape = layer.output_shape(&shape).expect("validated at construction");
        }
        shape[0]
    }

    /// Index of the final dense layer (the classification head).
    pub fn head_index(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::Dense { .. }))
            .unwrap_or(self.layers.len())
    }

    pub fn feature_len(&self) -> usize {
        match self.layers.get(self.head_index()).map(|l| &l.kind) {
            Some(LayerKind::Dense { in_features, .. }) => *in_features,
            _ => self.num_outputs(),
        }
    }

    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn trainable_params(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .layers
            .iter()
            .filter(|l| l.trainable)
            .flat_map(|l| l.params().into_iter().map(|(n, _)| n))
            .collect();
        names.sort();
        names
    }

    /// Every demanded tensor present with the exact shape, and nothing else.
    pub fn validate(&self, store: &WeightStore) -> Result<()> {
        let shapes = self.param_shapes();
        let missing: Vec<String> = shapes
            .keys()
            .filter(|k| !store.contains(k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for (name, shape) in &shapes {
            let got = store.get(name).unwrap().shape();
            if got != &shape[..] {
                return Err(Error::ShapeTable(format!("{name} has shape {got:?}, expected {shape:?}")));
            }
        }
        let extras: Vec<&str> = store.names().filter(|n| !shapes.contains_key(*n)).collect();
        if !extras.is_empty() {
            return Err(Error::ShapeTable(format!("unexpected tensors: {}", extras.join(", "))));
        }
        Ok(())
    }

    /// Glorot-uniform kernels, zero biases, identity batchnorm.
    pub fn init_weights(&self, seed: u64) -> WeightStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = WeightStore::new();
        for layer in &self.layers {
            let fans = match layer.kind {
                LayerKind::Conv2d {
                    kernel: [kh, kw],
                    in_channels,
                    out_channels,
                    ..
                } => Some((kh * kw * in_channels, kh * kw * out_channels)),
                // Each depthwise filter sees one channel.
                LayerKind::Depthwise { kernel: [kh, kw], .. } => Some((kh * kw, kh * kw)),
                LayerKind::Dense {
                    in_features,
                    out_features,
                } => Some((in_features, out_features)),
                _ => None,
            };
            for (name, shape) in layer.params() {
                let suffix = name.rsplit('/').next().unwrap_or("");
                let tensor = match (suffix, fans) {
                    ("kernel", Some((fan_in, fan_out))) => {
                        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound) as f32)
                    }
                    ("gamma" | "moving_variance", _) => Tensor::full(&shape, 1.0),
                    _ => Tensor::zeros(&shape),
                };
                store.insert(name, tensor);
            }
        }
        store
    }

    /// Data-dependent batchnorm statistics for a randomly initialised stack.
    ///
    /// Walks `batch` through the backbone. Every batchnorm except the last
    /// gets zero mean and one shared variance equal to the second moment of
    /// its input, so activations have unit RMS while each layer stays a
    /// positive rescaling (the ReLU6 stack keeps its geometry). The last
    /// batchnorm standardises each channel, which centres the pooled features.
    /// Returns the number of batchnorm layers updated.
    pub fn calibrate_batchnorm(&self, store: &mut WeightStore, batch: &Tensor) -> Result<usize> {
        self.check_input(batch)?;
        let backbone = &self.layers[..self.head_index()];
        let Some(last) = backbone
            .iter()
            .rposition(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
        else {
            return Err(Error::Transform("network has no batchnorm layers to calibrate".into()));
        };
        let mut cur = batch.clone();
        let mut updated = 0;
        for (i, layer) in backbone.iter().enumerate() {
            if let LayerKind::BatchNorm { channels, .. } = layer.kind {
                let (mean, var) = channel_moments(&cur, channels);
                let (mean, var) = if i == last {
                    (mean, var)
                } else {
                    let m2 = mean.iter().zip(&var).map(|(m, v)| v + m * m).sum::<f64>() / channels as f64;
                    (vec![0.0; channels], vec![m2; channels])
                };
                if var.iter().chain(&mean).any(|v| !v.is_finite()) {
                    return Err(Error::Transform(format!("{}: non-finite calibration statistics", layer.name)));
                }
                // A constant channel (or a single-pixel batch) has nothing to scale.
                let var: Vec<f64> = var.into_iter().map(|v| if v > 0.0 { v } else { 1.0 }).collect();
                let to_tensor = |v: Vec<f64>| Tensor::new(vec![channels], v.into_iter().map(|x| x as f32).collect());
                store.insert(layer.param("moving_mean"), to_tensor(mean)?);
                store.insert(layer.param("moving_variance"), to_tensor(var)?);
                updated += 1;
            }
            cur = layer.forward(store, &cur)?;
        }
        Ok(updated)
    }

    pub fn check_input(&self, batch: &Tensor) -> Result<()> {
        let [_, h, w, c] = batch.dims4()?;
        if [h, w, c] != self.input_shape {
            return Err(shape_err!(
                "batch images are {h}×{w}×{c}, model expects {:?}",
                self.input_shape
            ));
        }
        Ok(())
    }

    /// Runs `layers[range]` on `x`.
    pub fn run(&self, store: &WeightStore, x: &Tensor, range: Range<usize>) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers[range] {
            cur = layer.forward(store, &cur)?;
        }
        Ok(cur)
    }

    /// Logits for a batch.
    pub fn forward(&self, store: &WeightStore, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        self.run(store, batch, 0..self.layers.len())
    }

    /// Activations entering the head.
    pub fn features(&self, store: &WeightStore, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        self.run(store, batch, 0..self.head_index())
    }

    /// Head logits from precomputed features.
    pub fn head(&self, store: &WeightStore, features: &Tensor) -> Result<Tensor> {
        self.run(store, features, self.head_index()..self.layers.len())
    }

    pub fn forward_tape(&self, store: &WeightStore, batch: &Tensor) -> Result<Tape> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = batch.clone();
        for layer in &self.layers {
            let next = layer.forward(store, &cur)?;
            inputs.push(cur);
            cur = next;
        }
        Ok(Tape { inputs, output: cur })
    }

    /// Backpropagates `grad_output` (gradient w.r.t. the chain output) through
    /// the tape. Parameter gradients are collected for every layer when
    /// `with_params`, otherwise only the input gradient is produced.
    pub fn backward(
        &self,
        store: &WeightStore,
        tape: &Tape,
        grad_output: &Tensor,
        with_params: bool,
    ) -> Result<Backward> {
        if grad_output.shape() != tape.output.shape() {
            return Err(shape_err!(
                "output gradient {:?} vs output {:?}",
                grad_output.shape(),
                tape.output.shape()
            ));
        }
        let mut grad = grad_output.clone();
        let mut params = BTreeMap::new();
        for (layer, x) in self.layers.iter().zip(&tape.inputs).rev() {
            let (gx, pg) = layer.backward(store, x, &grad, with_params)?;
            params.extend(pg);
            grad = gx;
        }
        Ok(Backward { input: grad, params })
    }
}

/// Per-channel mean and (population) variance over every other axis.
fn channel_moments(x: &Tensor, channels: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    for px in x.data().chunks(channels) {
        for (c, &v) in px.iter().enumerate() {
            sum[c] += v as f64;
            sq[c] += v as f64 * v as f64;
        }
    }
    let n = (x.len() / channels).max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
    (mean, var)
}

/// A network bound to a validated weight store.
#[derive(Clone, Debug)]
pub struct Model {
    pub network: Network,
    pub weights: WeightStore,
}

impl Model {
    pub fn new(network: Network, weights: WeightStore) -> Result<Self> {
        network.validate(&weights)?;
        Ok(Self { network, weights })
    }

    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.network.forward(&self.weights, batch)
    }

    pub fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        ops::softmax(&self.logits(batch)?)
    }

    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        self.network.features(&self.weights, batch)
    }

    /// Gradient of one pre-softmax logit with respect to the input image
    /// (`H×W×C`, no batch axis).
    pub fn logit_input_gradient(&self, image: &Tensor, class_index: usize) -> Result<Tensor> {
        let k = self.network.num_outputs();
        if class_index >= k {
            return Err(Error::ClassIndex {
                index: class_index,
                bound: k,
            });
        }
        let batch = Tensor::stack(std::slice::from_ref(image))?;
        let tape = self.network.forward_tape(&self.weights, &batch)?;
        let mut seed = Tensor::zeros(&[1, k]);
        seed.data_mut()[class_index] = 1.0;
        let back = self.network.backward(&self.weights, &tape, &seed, false)?;
        Ok(back.input.unstack(0))
    }
}
