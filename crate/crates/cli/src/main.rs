use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dermanet::augment::{augment, item_rng, AugmentationConfig};
use dermanet::backbone::{self, ModelSpec};
use dermanet::data::{self, Preprocessing, ValidationSource};
use dermanet::export::{self, Artifact};
use dermanet::saliency::{render_heatmap, saliency};
use dermanet::synth::{self, SynthConfig};
use dermanet::trainer::{run_experiment, Arm, ExperimentConfig};
use dermanet::Tensor;
use dermanet_serve::ServeConfig;
use rand::seq::SliceRandom;
use rand::SeedableRng;

#[derive(Parser)]
#[command(name = "dermanet", version, about = "Skin-lesion classifier: train, export, explain and serve")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PreprocessingArg {
    /// x / 127.5 − 1
    Default,
    /// x / 255
    Rescale,
}

impl From<PreprocessingArg> for Preprocessing {
    fn from(p: PreprocessingArg) -> Self {
        match p {
            PreprocessingArg::Default => Preprocessing::Default,
            PreprocessingArg::Rescale => Preprocessing::rescale_unit(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic colored-texture corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write seeded random backbone weights, optionally with batchnorm
    /// statistics calibrated on a held-out image directory.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        alpha: f32,
        #[arg(long, default_value_t = 224)]
        input_size: usize,
        #[arg(long, default_value_t = 7)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Class-per-directory images to calibrate on. Must not overlap the
        /// evaluation data.
        #[arg(long)]
        calibrate: Option<PathBuf>,
        #[arg(long, default_value_t = 140)]
        calibrate_count: usize,
        /// Preprocessing the calibration images get; match the training arm.
        #[arg(long, value_enum, default_value = "default")]
        preprocessing: PreprocessingArg,
    },
    /// Write the stratified train/test/validation plan as JSON.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        validation_from_train: bool,
    },
    /// Train the head for one experiment arm and write a checkpoint plus
    /// reports.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        arm: Arm,
        /// Experiment config (JSON); missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backbone weights; seeded random init when absent.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for report.json, report.txt and confusion.png
        /// (default: beside the checkpoint).
        #[arg(long)]
        report_dir: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drop optimizer state; writes labels.txt beside the bundle.
    Freeze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold batchnorm into the convolutions.
    Optimize {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print class probabilities for one image.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Gradient saliency overlay for one image.
    Saliency {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Label name or index; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
    },
    /// Write N augmented variants of an image as PNG.
    AugmentPreview {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Experiment config whose augmentation block is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Size and load time of a weight file, checkpoint or bundle.
    Stats { path: PathBuf },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
}

fn read_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn calibration_batch(dir: &Path, count: usize, seed: u64, size: usize, pre: Preprocessing) -> Result<Tensor> {
    let manifest = data::scan_dataset(dir)?;
    let mut items = manifest.items;
    items.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    items.truncate(count.max(1));
    let paths: Vec<&Path> = items.iter().map(|s| s.path.as_path()).collect();
    let images: Vec<Tensor> = data::load_images(&paths, size)?.iter().map(|t| pre.apply(t)).collect();
    Ok(Tensor::stack(&images)?)
}

fn load_inference_bundle(path: &Path) -> Result<export::Bundle> {
    Ok(export::freeze(&export::load_artifact(path)?)?)
}

fn resolve_class(arg: Option<&str>, labels: &[String], predicted: usize) -> Result<usize> {
    let Some(arg) = arg else { return Ok(predicted) };
    if let Some(i) = labels.iter().position(|l| l == arg) {
        return Ok(i);
    }
    match arg.parse::<usize>() {
        Ok(i) if i < labels.len() => Ok(i),
        _ => bail!("unknown class {arg:?}; labels are {}", labels.join(", ")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            per_class,
            size,
            seed,
        } => {
            let cfg = SynthConfig {
                images_per_class: per_class,
                size,
                seed,
                ..Default::default()
            };
            let m = synth::generate_corpus(&out, &cfg)?;
            println!("wrote {} images in {} classes to {}", m.total(), m.num_classes(), out.display());
        }
        Command::Init {
            out,
            alpha,
            input_size,
            classes,
            seed,
            calibrate,
            calibrate_count,
            preprocessing,
        } => {
            let spec = ModelSpec::new(alpha, input_size, classes);
            let mut store = backbone::init_weights(&spec, seed)?;
            if let Some(dir) = calibrate {
                let batch = calibration_batch(&dir, calibrate_count, seed, input_size, preprocessing.into())?;
                store = backbone::calibrate_batchnorm(&store, &spec, &batch)?;
                println!("calibrated batchnorm on {} images", batch.shape()[0]);
            }
            backbone::save_weights(&store, &out)?;
            println!("wrote {} tensors ({} values) to {}", store.len(), store.total_values(), out.display());
        }
        Command::Split {
            data: root,
            out,
            train_fraction,
            seed,
            validation_from_train,
        } => {
            let source = if validation_from_train {
                ValidationSource::FromTrain
            } else {
                ValidationSource::CopyOfTest
            };
            let plan = data::stratified_split(&data::scan_dataset(&root)?, train_fraction, seed, source)?;
            write(&out, plan.to_json()?)?;
            println!("train {:?}\ntest  {:?}", plan.train_counts(), plan.test_counts());
        }
        Command::Train {
            data: root,
            arm,
            config,
            weights,
            out,
            report_dir,
            seed,
        } => {
            let mut cfg = read_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.hyperparams.seed = s;
            }
            let store = match weights {
                Some(p) => backbone::load_weights(&p, Some(&cfg.model))?.0,
                None => backbone::init_weights(&cfg.model, cfg.hyperparams.seed)?,
            };
            let outcome = run_experiment(&root, arm, &store, &cfg)?;
            export::Checkpoint::from_outcome(&outcome).save(&out)?;
            let dir = report_dir.unwrap_or_else(|| out.parent().map(Path::to_path_buf).unwrap_or_default());
            let report = &outcome.report;
            write(&dir.join("report.json"), report.to_json()?)?;
            write(&dir.join("report.txt"), report.render_text())?;
            write(&dir.join("confusion.png"), report.confusion_matrix().render_png(48)?)?;
            print!("{}", report.render_text());
            println!("\ncheckpoint: {}\nreports:    {}", out.display(), dir.display());
        }
        Command::Freeze { checkpoint, out } => {
            let bundle = export::freeze(&export::load_artifact(&checkpoint)?)?;
            export::write_frozen(&bundle, &out)?;
            println!("wrote {} and {}", out.display(), out.with_file_name(export::LABELS_FILE).display());
        }
        Command::Optimize { bundle, out } => {
            let frozen = match export::load_artifact(&bundle)? {
                Artifact::Bundle(b) => b,
                Artifact::Checkpoint(_) => bail!("{} is a checkpoint; freeze it first", bundle.display()),
            };
            let optimized = export::optimize(&frozen)?;
            optimized.save(&out)?;
            println!(
                "{} tensors → {}; wrote {}",
                frozen.weights.len(),
                optimized.weights.len(),
                out.display()
            );
        }
        Command::Classify { model, image } => {
            let bundle = load_inference_bundle(&model)?;
            let raw = data::load_image(&image, bundle.spec.input_size)?;
            let probs = bundle.model()?.probabilities(&Tensor::stack(&[bundle.preprocessing.apply(&raw)])?)?;
            let p = probs.sample(0);
            let mut order: Vec<usize> = (0..p.len()).collect();
            order.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
            for i in order {
                println!("{:<20} {:>6.2}%", bundle.labels[i], p[i] * 100.0);
            }
        }
        Command::Saliency {
            model,
            image,
            class,
            out,
            alpha,
        } => {
            let bundle = load_inference_bundle(&model)?;
            let raw = data::load_image(&image, bundle.spec.input_size)?;
            let input = bundle.preprocessing.apply(&raw);
            let net = bundle.model()?;
            let probs = net.probabilities(&Tensor::stack(std::slice::from_ref(&input))?)?;
            let predicted = dermanet::eval::argmax(probs.sample(0));
            let class = resolve_class(class.as_deref(), &bundle.labels, predicted)?;
            let map = saliency(&net, &input, class)?;
            write(&out, render_heatmap(&map, &raw, alpha)?)?;
            println!(
                "saliency for {} (predicted {}){}; wrote {}",
                bundle.labels[class],
                bundle.labels[predicted],
                if map.flat { ", flat" } else { "" },
                out.display()
            );
        }
        Command::AugmentPreview {
            image,
            count,
            out,
            config,
            size,
            seed,
        } => {
            let aug: AugmentationConfig = read_config(config.as_deref())?.augmentation;
            aug.validate()?;
            let img = data::load_image(&image, size)?;
            std::fs::create_dir_all(&out)?;
            for i in 0..count {
                let a = augment(&img, &aug, &mut item_rng(seed, i as u64))?;
                // Back to 0–255 for viewing.
                let png = data::encode_png(&a.map(|v| v / aug.rescale))?;
                write(&out.join(format!("augmented_{i:03}.png")), png)?;
            }
            println!("wrote {count} images to {}", out.display());
        }
        Command::Stats { path } => {
            let stats = match export::bundle_stats(&path) {
                Ok(s) => s,
                Err(_) => backbone::load_weights(&path, None)?.1,
            };
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Serve {
            bundle,
            port,
            static_dir,
            host,
        } => {
            let cfg = ServeConfig {
                host,
                bundle,
                static_dir,
                ..Default::default()
            }
            .with_env(port, |k| std::env::var(k).ok())
            .map_err(anyhow::Error::msg)?;
            tokio::runtime::Runtime::new()?.block_on(dermanet_serve::serve(cfg))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
