//! Transfer-learning head training and the four-arm experiment harness.
//!
//! The backbone is frozen, so for arms without augmentation its features are
//! computed once and the head is trained as a softmax regression on them.
//! The augmentation arm re-renders every training image each epoch and runs
//! the frozen stack again on the new pixels.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{self, AugmentationConfig};
use crate::backbone::{build_model, ModelSpec, Network, WeightStore, HEAD_LAYER};
use crate::data::{self, Preprocessing, Sample, SamplingMode, SamplingOptions, ValidationSource};
use crate::error::{Error, Result};
use crate::eval::{self, ConfusionMatrix};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 30,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_epsilon > 0.0) {
            return Err(Error::Config("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// First/second moment estimates and step count for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(param: &mut Tensor, grad: &Tensor, state: &mut AdamState, hp: &Hyperparams) -> Result<()> {
    if param.shape() != grad.shape() || state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::Shape(format!(
            "adam_step: param {:?}, grad {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    state.t += 1;
    let (b1, b2) = (hp.adam_beta1, hp.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        let g = g as f64;
        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = hp.learning_rate * (mi / c1) / ((vi / c2).sqrt() + hp.adam_epsilon);
        *p = (*p as f64 - step) as f32;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    pub wall_time_seconds: f64,
}

/// Dense head parameters and their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub kernel_state: AdamState,
    pub bias_state: AdamState,
}

impl Head {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let [_, k] = kernel.dims2()?;
        if bias.shape() != [k] {
            return Err(Error::Shape(format!("head bias {:?} for {k} classes", bias.shape())));
        }
        Ok(Self {
            kernel_state: AdamState::new(kernel.shape()),
            bias_state: AdamState::new(bias.shape()),
            kernel,
            bias,
        })
    }

    pub fn from_store(store: &WeightStore) -> Result<Self> {
        Self::new(
            store.require(&format!("{HEAD_LAYER}/kernel"))?.clone(),
            store.require(&format!("{HEAD_LAYER}/bias"))?.clone(),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        ops::dense(features, &self.kernel, &self.bias)
    }

    /// Copies the head parameters into `store`, leaving every other tensor alone.
    pub fn write_into(&self, store: &mut WeightStore) {
        store.insert(format!("{HEAD_LAYER}/kernel"), self.kernel.clone());
        store.insert(format!("{HEAD_LAYER}/bias"), self.bias.clone());
    }
}

/// Epoch-at-a-time mini-batch Adam over fixed or per-epoch features.
pub struct HeadTrainer {
    pub head: Head,
    hp: Hyperparams,
    shuffle_rng: ChaCha8Rng,
    log: TrainLog,
    started: Instant,
}

impl HeadTrainer {
    pub fn new(head: Head, hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        Ok(Self {
            shuffle_rng: ChaCha8Rng::seed_from_u64(hp.seed),
            head,
            hp,
            log: TrainLog::default(),
            started: Instant::now(),
        })
    }

    pub fn run_epoch(&mut self, features: &Tensor, labels: &[usize]) -> Result<EpochStats> {
        let [n, f] = features.dims2()?;
        if n == 0 {
            return Err(Error::Training("no training samples".into()));
        }
        if labels.len() != n {
            return Err(Error::Training(format!("{n} feature rows but {} labels", labels.len())));
        }
        let k = self.head.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::ClassIndex { index: bad, bound: k });
        }
        if self.head.kernel.shape()[0] != f {
            return Err(Error::Shape(format!(
                "features have {f} columns, head expects {}",
                self.head.kernel.shape()[0]
            )));
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for batch in order.chunks(self.hp.batch_size) {
            let mut x = Vec::with_capacity(batch.len() * f);
            for &i in batch {
                x.extend_from_slice(features.sample(i));
            }
            let x = Tensor::new(vec![batch.len(), f], x)?;
            let y_idx: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let y = ops::one_hot(&y_idx, k)?;
            let probs = ops::softmax(&self.head.logits(&x)?)?;
            loss_sum += ops::cross_entropy(&probs, &y)? as f64 * batch.len() as f64;
            correct += eval::predictions(&probs)?
                .iter()
                .zip(&y_idx)
                .filter(|(p, t)| p == t)
                .count();
            let grad = ops::softmax_cross_entropy_backward(&probs, &y)?;
            let g = ops::dense_backward(&x, &self.head.kernel, &grad)?;
            adam_step(&mut self.head.kernel, &g.weights, &mut self.head.kernel_state, &self.hp)?;
            adam_step(&mut self.head.bias, &g.bias, &mut self.head.bias_state, &self.hp)?;
        }
        let stats = EpochStats {
            epoch: self.log.epochs.len() + 1,
            mean_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
        };
        self.log.epochs.push(stats.clone());
        Ok(stats)
    }

    pub fn finish(mut self) -> (Head, TrainLog) {
        self.log.wall_time_seconds = self.started.elapsed().as_secs_f64();
        (self.head, self.log)
    }
}

/// Trains the head for `hp.epochs` epochs on fixed features.
pub fn train_head(features: &Tensor, labels: &[usize], hp: &Hyperparams, init: Head) -> Result<(Head, TrainLog)> {
    let mut trainer = HeadTrainer::new(init, hp.clone())?;
    for _ in 0..hp.epochs {
        trainer.run_epoch(features, labels)?;
    }
    Ok(trainer.finish())
}

// ---------------------------------------------------------------------------
// Experiment harness
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessingKind {
    Default,
    Augmented,
}

/// The four sampling/preprocessing combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    /// Undersampling, default preprocessing.
    A,
    /// Imbalanced, default preprocessing.
    B,
    /// Oversampling, default preprocessing.
    C,
    /// Oversampling with augmentation.
    D,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::A, Arm::B, Arm::C, Arm::D];

    pub fn sampling(self) -> SamplingMode {
        match self {
            Arm::A => SamplingMode::Undersample,
            Arm::B => SamplingMode::Imbalanced,
            Arm::C | Arm::D => SamplingMode::Oversample,
        }
    }

    pub fn preprocessing(self) -> PreprocessingKind {
        match self {
            Arm::D => PreprocessingKind::Augmented,
            _ => PreprocessingKind::Default,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Arm::A => "A",
            Arm::B => "B",
            Arm::C => "C",
            Arm::D => "D",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            Arm::A => "undersample + default preprocessing",
            Arm::B => "imbalanced + default preprocessing",
            Arm::C => "oversample + default preprocessing",
            Arm::D => "oversample + augmentation",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Arm::A),
            "B" => Ok(Arm::B),
            "C" => Ok(Arm::C),
            "D" => Ok(Arm::D),
            other => Err(Error::Config(format!("unknown arm '{other}', expected A, B, C or D"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub hyperparams: Hyperparams,
    pub train_fraction: f64,
    pub validation_source: ValidationSource,
    /// Oversampling also balances the test split.
    pub resample_test: bool,
    pub augmentation: AugmentationConfig,
    /// Images per frozen-backbone forward call.
    pub feature_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            hyperparams: Hyperparams::default(),
            train_fraction: 0.8,
            validation_source: ValidationSource::CopyOfTest,
            resample_test: true,
            augmentation: AugmentationConfig::default(),
            feature_batch_size: 64,
        }
    }
}

impl ExperimentConfig {
    /// Preprocessing applied to evaluation (and served) images for `arm`.
    pub fn eval_preprocessing(&self, arm: Arm) -> Preprocessing {
        match arm.preprocessing() {
            PreprocessingKind::Default => Preprocessing::Default,
            PreprocessingKind::Augmented => Preprocessing::Rescale {
                factor: self.augmentation.rescale,
            },
        }
    }
}

/// Everything needed to replay the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentEcho {
    pub description: String,
    pub sampling: SamplingMode,
    pub preprocessing: PreprocessingKind,
    pub eval_preprocessing: Preprocessing,
    pub evaluated_on: String,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub config: ExperimentConfig,
}

/// Metrics document: `{arm, seed, accuracy, per_class_accuracy, confusion,
/// normalized, class_names, ...}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub arm: String,
    pub seed: u64,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub confusion: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
    pub class_names: Vec<String>,
    pub test_samples: u64,
    /// `P(X ≥ correct)` under uniform guessing over the classes.
    pub chance_p_value: f64,
    pub epochs: Vec<EpochStats>,
    pub echo: ExperimentEcho,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn confusion_matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            counts: self.confusion.clone(),
            class_names: self.class_names.clone(),
        }
    }

    /// Human-readable summary with both confusion tables.
    pub fn render_text(&self) -> String {
        let mut out = format!(
            "Arm {} ({})\nrank-1 accuracy: {:.2}% on {} test images (chance p = {:.3e})\n\nPer-class accuracy\n",
            self.arm,
            self.echo.description,
            self.accuracy * 100.0,
            self.test_samples,
            self.chance_p_value
        );
        for (name, acc) in self.class_names.iter().zip(&self.per_class_accuracy) {
            out.push_str(&format!("  {name:<20} {:>6.1}%\n", acc * 100.0));
        }
        out.push('\n');
        out.push_str(&self.confusion_matrix().render_text());
        out
    }
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    /// Input weights with the trained head swapped in.
    pub weights: WeightStore,
    pub head: Head,
    pub train_log: TrainLog,
    pub class_names: Vec<String>,
    pub eval_preprocessing: Preprocessing,
}

/// Decoded images for every distinct path, resized to the model input.
fn load_unique(samples: &[&[Sample]], size: usize) -> Result<HashMap<PathBuf, Tensor>> {
    let mut paths: Vec<&Path> = samples
        .iter()
        .flat_map(|s| s.iter().map(|x| x.path.as_path()))
        .collect();
    paths.sort();
    paths.dedup();
    let images = data::load_images(&paths, size)?;
    Ok(paths.into_iter().map(Path::to_path_buf).zip(images).collect())
}

/// Runs the frozen stack over `images` in fixed-size chunks.
fn features_of(network: &Network, store: &WeightStore, images: &[Tensor], chunk: usize) -> Result<Tensor> {
    let f = network.feature_len();
    let mut out = Vec::with_capacity(images.len() * f);
    for group in images.chunks(chunk.max(1)) {
        let batch = Tensor::stack(group)?;
        out.extend_from_slice(network.features(store, &batch)?.data());
    }
    Tensor::new(vec![images.len(), f], out)
}

pub fn run_experiment(
    dataset_root: impl AsRef<Path>,
    arm: Arm,
    weights: &WeightStore,
    cfg: &ExperimentConfig,
) -> Result<ExperimentOutcome> {
    let hp = &cfg.hyperparams;
    hp.validate()?;
    cfg.augmentation.validate()?;
    let manifest = data::scan_dataset(dataset_root)?;
    let spec = ModelSpec {
        num_classes: manifest.num_classes(),
        ..cfg.model.clone()
    };
    if spec.num_classes != cfg.model.num_classes {
        log::warn!(
            "config declares {} classes, corpus has {}; using the corpus",
            cfg.model.num_classes,
            spec.num_classes
        );
    }
    let network = build_model(&spec)?;
    network.validate(weights)?;

    let split = data::stratified_split(&manifest, cfg.train_fraction, hp.seed, cfg.validation_source)?;
    let plan = data::apply_sampling(
        &split,
        arm.sampling(),
        hp.seed ^ 0x5A,
        SamplingOptions {
            resample_test: cfg.resample_test,
        },
    );
    let images = load_unique(&[&plan.train, &plan.test], spec.input_size)?;
    let eval_pre = cfg.eval_preprocessing(arm);

    let test_images: Vec<Tensor> = plan.test.iter().map(|s| eval_pre.apply(&images[&s.path])).collect();
    let test_features = features_of(&network, weights, &test_images, cfg.feature_batch_size)?;
    let test_labels: Vec<usize> = plan.test.iter().map(|s| s.class_index).collect();
    let train_labels: Vec<usize> = plan.train.iter().map(|s| s.class_index).collect();

    let mut trainer = HeadTrainer::new(Head::from_store(weights)?, hp.clone())?;
    match arm.preprocessing() {
        PreprocessingKind::Default => {
            let train_images: Vec<Tensor> = plan
                .train
                .iter()
                .map(|s| Preprocessing::Default.apply(&images[&s.path]))
                .collect();
            let features = features_of(&network, weights, &train_images, cfg.feature_batch_size)?;
            for _ in 0..hp.epochs {
                trainer.run_epoch(&features, &train_labels)?;
            }
        }
        PreprocessingKind::Augmented => {
            let aug_seed = hp.seed ^ 0xA5A5;
            for epoch in 0..hp.epochs {
                let seed = augment::epoch_seed(aug_seed, epoch as u64);
                let augmented: Vec<Tensor> = plan
                    .train
                    .par_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let mut rng = augment::item_rng(seed, i as u64);
                        augment::augment(&images[&s.path], &cfg.augmentation, &mut rng)
                    })
                    .collect::<Result<_>>()?;
                let features = features_of(&network, weights, &augmented, cfg.feature_batch_size)?;
                trainer.run_epoch(&features, &train_labels)?;
            }
        }
    }
    let (head, train_log) = trainer.finish();

    let preds = eval::predictions(&head.logits(&test_features)?)?;
    let cm = eval::confusion(&preds, &test_labels, spec.num_classes)?.with_names(&manifest.classes)?;
    let accuracy = cm.rank1_accuracy()?;
    let report = ExperimentReport {
        arm: arm.label().to_string(),
        seed: hp.seed,
        accuracy,
        per_class_accuracy: cm.per_class_accuracy(),
        normalized: cm.normalize(),
        confusion: cm.counts.clone(),
        class_names: manifest.classes.clone(),
        test_samples: cm.total(),
        chance_p_value: eval::binomial_upper_tail(cm.trace(), cm.total(), 1.0 / spec.num_classes as f64),
        epochs: train_log.epochs.clone(),
        echo: ExperimentEcho {
            description: arm.description().to_string(),
            sampling: arm.sampling(),
            preprocessing: arm.preprocessing(),
            eval_preprocessing: eval_pre,
            evaluated_on: "test".into(),
            train_counts: plan.train_counts(),
            test_counts: plan.test_counts(),
            config: ExperimentConfig {
                model: spec.clone(),
                ..cfg.clone()
            },
        },
    };
    let mut trained = weights.clone();
    head.write_into(&mut trained);
    Ok(ExperimentOutcome {
        report,
        weights: trained,
        head,
        train_log,
        class_names: manifest.classes,
        eval_preprocessing: eval_pre,
    })
}
