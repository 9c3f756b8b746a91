//! Deployment chain: training checkpoint → frozen bundle (+ `labels.txt`) →
//! optimized bundle with batchnorm folded into the convolutions.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "MBBD" | u32 version | u32 header_len | header (JSON) | MBWT tensor block
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, build_model, read_weights, write_weights, BundleStats, Layer, LayerKind, Model, ModelSpec, Network,
    WeightStore, HEAD_LAYER,
};
use crate::data::Preprocessing;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, ExperimentOutcome, Head, Hyperparams};

pub const BUNDLE_MAGIC: [u8; 4] = *b"MBBD";
pub const BUNDLE_VERSION: u32 = 1;
pub const LABELS_FILE: &str = "labels.txt";

/// Tensor-name prefix for optimizer moments inside a checkpoint.
const OPTIMIZER_PREFIX: &str = "optimizer/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BundleKind {
    Checkpoint,
    Frozen,
    Optimized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub kind: BundleKind,
    pub spec: ModelSpec,
    pub labels: Vec<String>,
    pub preprocessing: Preprocessing,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
    /// Adam step count for the head (checkpoints only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub weights: WeightStore,
    pub labels: Vec<String>,
    pub preprocessing: Preprocessing,
    pub hyperparams: Hyperparams,
    pub kernel_state: AdamState,
    pub bias_state: AdamState,
}

impl Checkpoint {
    pub fn from_outcome(outcome: &ExperimentOutcome) -> Self {
        Self {
            spec: outcome.report.echo.config.model.clone(),
            weights: outcome.weights.clone(),
            labels: outcome.class_names.clone(),
            preprocessing: outcome.eval_preprocessing,
            hyperparams: outcome.report.echo.config.hyperparams.clone(),
            kernel_state: outcome.head.kernel_state.clone(),
            bias_state: outcome.head.bias_state.clone(),
        }
    }

    pub fn head(&self) -> Result<Head> {
        let mut head = Head::from_store(&self.weights)?;
        head.kernel_state = self.kernel_state.clone();
        head.bias_state = self.bias_state.clone();
        Ok(head)
    }

    fn validate(&self) -> Result<()> {
        for (name, state) in [("kernel", &self.kernel_state), ("bias", &self.bias_state)] {
            let param = self.weights.require(&format!("{HEAD_LAYER}/{name}"))?;
            if state.m.shape() != param.shape() || state.v.shape() != param.shape() {
                return Err(Error::ShapeTable(format!(
                    "optimizer state for {HEAD_LAYER}/{name} is {:?}, parameter is {:?}",
                    state.m.shape(),
                    param.shape()
                )));
            }
        }
        check_labels(&self.labels, &self.spec)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut store = self.weights.clone();
        for (name, state) in [("kernel", &self.kernel_state), ("bias", &self.bias_state)] {
            store.insert(format!("{OPTIMIZER_PREFIX}{HEAD_LAYER}/{name}/m"), state.m.clone());
            store.insert(format!("{OPTIMIZER_PREFIX}{HEAD_LAYER}/{name}/v"), state.v.clone());
        }
        let header = BundleHeader {
            kind: BundleKind::Checkpoint,
            spec: self.spec.clone(),
            labels: self.labels.clone(),
            preprocessing: self.preprocessing,
            hyperparams: Some(self.hyperparams.clone()),
            adam_step: Some(self.kernel_state.t),
        };
        encode(&header, &store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }
}

/// Inference-only artifact: frozen or optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub spec: ModelSpec,
    pub weights: WeightStore,
    pub labels: Vec<String>,
    pub preprocessing: Preprocessing,
}

impl Bundle {
    pub fn kind(&self) -> BundleKind {
        if self.spec.batchnorm_folded {
            BundleKind::Optimized
        } else {
            BundleKind::Frozen
        }
    }

    pub fn is_optimized(&self) -> bool {
        self.spec.batchnorm_folded
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(build_model(&self.spec)?, self.weights.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_labels(&self.labels, &self.spec)?;
        let header = BundleHeader {
            kind: self.kind(),
            spec: self.spec.clone(),
            labels: self.labels.clone(),
            preprocessing: self.preprocessing,
            hyperparams: None,
            adam_step: None,
        };
        encode(&header, &self.weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes()?)
    }
}

/// Anything the container can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Checkpoint(Checkpoint),
    Bundle(Bundle),
}

fn check_labels(labels: &[String], spec: &ModelSpec) -> Result<()> {
    if labels.len() != spec.num_classes {
        return Err(Error::Config(format!(
            "{} labels for a {}-class model",
            labels.len(),
            spec.num_classes
        )));
    }
    if let Some(bad) = labels.iter().find(|l| l.is_empty() || l.contains(['\n', '\r'])) {
        return Err(Error::Config(format!("invalid label {bad:?}")));
    }
    Ok(())
}

fn encode(header: &BundleHeader, store: &WeightStore) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * store.total_values());
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    write_weights(store, &mut out)?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8]) -> Result<Artifact> {
    if bytes.len() < 12 {
        return Err(Error::Truncated(format!("bundle is {} bytes", bytes.len())));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != BUNDLE_MAGIC {
        return Err(Error::BadMagic {
            expected: BUNDLE_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BUNDLE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header_end = 12usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated("bundle header".into()))?;
    let header: BundleHeader = serde_json::from_slice(&bytes[12..header_end])?;
    let (mut store, used) = read_weights(&bytes[header_end..])?;
    if header_end + used != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after tensor block",
            bytes.len() - header_end - used
        )));
    }
    check_labels(&header.labels, &header.spec)?;

    let artifact = match header.kind {
        BundleKind::Checkpoint => {
            let mut take = |name: &str| -> Result<Tensor> {
                let key = format!("{OPTIMIZER_PREFIX}{HEAD_LAYER}/{name}");
                store.remove(&key).ok_or_else(|| Error::MissingTensors(vec![key]))
            };
            let t = header.adam_step.unwrap_or(0);
            let kernel_state = AdamState {
                m: take("kernel/m")?,
                v: take("kernel/v")?,
                t,
            };
            let bias_state = AdamState {
                m: take("bias/m")?,
                v: take("bias/v")?,
                t,
            };
            let ckpt = Checkpoint {
                spec: header.spec,
                weights: store,
                labels: header.labels,
                preprocessing: header.preprocessing,
                hyperparams: header.hyperparams.unwrap_or_default(),
                kernel_state,
                bias_state,
            };
            ckpt.validate()?;
            build_model(&ckpt.spec)?.validate(&ckpt.weights)?;
            Artifact::Checkpoint(ckpt)
        }
        BundleKind::Frozen | BundleKind::Optimized => {
            if (header.kind == BundleKind::Optimized) != header.spec.batchnorm_folded {
                return Err(Error::Malformed(format!(
                    "{:?} bundle with batchnorm_folded = {}",
                    header.kind, header.spec.batchnorm_folded
                )));
            }
            let bundle = Bundle {
                spec: header.spec,
                weights: store,
                labels: header.labels,
                preprocessing: header.preprocessing,
            };
            build_model(&bundle.spec)?.validate(&bundle.weights)?;
            Artifact::Bundle(bundle)
        }
    };
    Ok(artifact)
}

pub fn load_artifact(path: impl AsRef<Path>) -> Result<Artifact> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    match load_artifact(path)? {
        Artifact::Checkpoint(c) => Ok(c),
        Artifact::Bundle(_) => Err(Error::Config("expected a checkpoint, found an inference bundle".into())),
    }
}

/// Loads a frozen or optimized bundle, timing the load.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<(Bundle, BundleStats)> {
    let path = path.as_ref();
    backbone::timed_load(path, || match load_artifact(path)? {
        Artifact::Bundle(b) => Ok(b),
        Artifact::Checkpoint(_) => Err(Error::Config("expected an inference bundle, found a checkpoint".into())),
    })
}

/// File size and load wall time of any container file.
pub fn bundle_stats(path: impl AsRef<Path>) -> Result<BundleStats> {
    let path = path.as_ref();
    Ok(backbone::timed_load(path, || load_artifact(path))?.1)
}

/// Drops optimizer state. Frozen bundles pass through unchanged.
pub fn freeze(artifact: &Artifact) -> Result<Bundle> {
    match artifact {
        Artifact::Checkpoint(c) => {
            build_model(&c.spec)?.validate(&c.weights)?;
            Ok(Bundle {
                spec: c.spec.clone(),
                weights: c.weights.clone(),
                labels: c.labels.clone(),
                preprocessing: c.preprocessing,
            })
        }
        Artifact::Bundle(b) => {
            build_model(&b.spec)?.validate(&b.weights)?;
            Ok(b.clone())
        }
    }
}

pub fn labels_text(labels: &[String]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Writes `bundle` to `path` and `labels.txt` beside it.
pub fn write_frozen(bundle: &Bundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    bundle.save(path)?;
    let labels = path.with_file_name(LABELS_FILE);
    write_file(&labels, labels_text(&bundle.labels).as_bytes())
}

/// Folds every batchnorm into the convolution feeding it and removes the
/// batchnorm layers and tensors. The returned network gives each folded
/// convolution a bias.
pub fn fold_batchnorm(network: &Network, store: &WeightStore) -> Result<(Network, WeightStore)> {
    network.validate(store)?;
    if !network
        .layers()
        .iter()
        .any(|l| matches!(l.kind, LayerKind::BatchNorm { .. }))
    {
        return Err(Error::Transform("no batchnorm layers left to fold".into()));
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(network.layers().len());
    let mut out = store.clone();
    for layer in network.layers() {
        let LayerKind::BatchNorm { channels, .. } = layer.kind else {
            layers.push(layer.clone());
            continue;
        };
        let Some(prev) = layers.last_mut() else {
            return Err(Error::Transform(format!("{} has no preceding convolution", layer.name)));
        };
        let conv_channels = match prev.kind {
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::Depthwise { channels, .. } => channels,
            _ => {
                return Err(Error::Transform(format!(
                    "{} follows {} rather than a convolution",
                    layer.name,
                    if prev.name.is_empty() { "an unnamed layer" } else { &prev.name }
                )))
            }
        };
        if conv_channels != channels {
            return Err(Error::Transform(format!(
                "{} has {channels} channels, {} produces {conv_channels}",
                layer.name, prev.name
            )));
        }
        let affine = layer.bn_params(store)?.affine();
        let conv = prev.conv_params(&out)?;
        // The output channel is the fastest-varying index of both kernel layouts
        // once the trailing depthwise multiplier of 1 is accounted for.
        let kernel = Tensor::new(
            conv.kernel.shape().to_vec(),
            conv.kernel
                .data()
                .iter()
                .enumerate()
                .map(|(i, &w)| (w as f64 * affine[i % channels].0) as f32)
                .collect(),
        )?;
        let bias: Vec<f32> = (0..channels)
            .map(|c| {
                let b = conv.bias.as_ref().map_or(0.0, |b| b.data()[c] as f64);
                let (scale, shift) = affine[c];
                (b * scale + shift) as f32
            })
            .collect();
        match &mut prev.kind {
            LayerKind::Conv2d { bias, .. } | LayerKind::Depthwise { bias, .. } => *bias = true,
            _ => unreachable!(),
        }
        out.insert(prev.param("kernel"), kernel);
        out.insert(prev.param("bias"), Tensor::new(vec![channels], bias)?);
        for (name, _) in layer.params() {
            out.remove(&name);
        }
    }
    let folded = Network::new(network.input_shape(), layers)?;
    folded.validate(&out)?;
    Ok((folded, out))
}

/// Batchnorm folding on a frozen bundle. Applying it twice is an error.
pub fn optimize(bundle: &Bundle) -> Result<Bundle> {
    if bundle.is_optimized() {
        return Err(Error::Transform("bundle is already optimized: no batchnorm tensors remain".into()));
    }
    let network = build_model(&bundle.spec)?;
    let (_, weights) = fold_batchnorm(&network, &bundle.weights)?;
    let spec = ModelSpec {
        batchnorm_folded: true,
        ..bundle.spec.clone()
    };
    build_model(&spec)?.validate(&weights)?;
    Ok(Bundle {
        spec,
        weights,
        labels: bundle.labels.clone(),
        preprocessing: bundle.preprocessing,
    })
}
