//! Independent reference implementations shared by the integration tests.
//!
//! Every oracle here is a direct nested-loop transcription of the textbook
//! definition in `f64`, written without reference to the library kernels.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use dermanet::backbone::{LayerKind, ModelSpec, Network, WeightStore};
use dermanet::data::Preprocessing;
use dermanet::ops::{self, BatchNormParams, ConvParams, Padding};
use dermanet::synth;
use dermanet::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Published dataset rows as `(class, images, train, test)`, in label order.
pub const DATASET_ROWS: [(&str, usize, usize, usize); 7] = [
    ("acne", 805, 644, 161),
    ("eczema", 599, 479, 120),
    ("pityriasis_rosea", 347, 278, 69),
    ("psoriasis", 633, 506, 127),
    ("tinea_corporis", 385, 308, 77),
    ("varicella", 314, 251, 63),
    ("vitiligo", 323, 258, 65),
];

pub fn dataset_manifest() -> dermanet::data::DatasetManifest {
    let names: Vec<&str> = DATASET_ROWS.iter().map(|r| r.0).collect();
    let counts: Vec<usize> = DATASET_ROWS.iter().map(|r| r.1).collect();
    dermanet::data::DatasetManifest::from_counts(&names, &counts).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], scale: f32, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// `(out, pad_before)` for one axis, from the padding definition.
pub fn extent(input: usize, k: usize, s: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => ((input - k) / s + 1, 0),
        Padding::Same => {
            let out = (input + s - 1) / s;
            let needed = (out - 1) * s + k;
            let total = needed.saturating_sub(input);
            (out, total / 2)
        }
    }
}

/// NHWC array in `f64` with shape.
#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }

    fn at4(&self, n: usize, y: usize, x: usize, c: usize) -> f64 {
        let [_, h, w, ch] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * h + y) * w + x) * ch + c]
    }
}

pub fn conv2d(x: &Arr, k: &[f64], kshape: [usize; 4], bias: Option<&[f64]>, s: usize, pad: Padding) -> Arr {
    let [n, h, w, _] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let [kh, kw, ci, co] = kshape;
    let (oh, pt) = extent(h, kh, s, pad);
    let (ow, pl) = extent(w, kw, s, pad);
    let mut out = vec![0.0; n * oh * ow * co];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..co {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * s + dy) as isize - pt as isize;
                            let ix = (ox * s + dx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for i in 0..ci {
                                acc += x.at4(b, iy as usize, ix as usize, i) * k[((dy * kw + dx) * ci + i) * co + o];
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * co + o] = acc;
                }
            }
        }
    }
    Arr {
        shape: vec![n, oh, ow, co],
        data: out,
    }
}

pub fn depthwise(x: &Arr, k: &[f64], kh: usize, kw: usize, bias: Option<&[f64]>, s: usize, pad: Padding) -> Arr {
    let [n, h, w, c] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let (oh, pt) = extent(h, kh, s, pad);
    let (ow, pl) = extent(w, kw, s, pad);
    let mut out = vec![0.0; n * oh * ow * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut acc = bias.map_or(0.0, |b| b[ch]);
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (oy * s + dy) as isize - pt as isize;
                            let ix = (ox * s + dx) as isize - pl as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at4(b, iy as usize, ix as usize, ch) * k[(dy * kw + dx) * c + ch];
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * c + ch] = acc;
                }
            }
        }
    }
    Arr {
        shape: vec![n, oh, ow, c],
        data: out,
    }
}

pub fn batchnorm(x: &Arr, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64], eps: f64) -> Arr {
    let c = *x.shape.last().unwrap();
    let data = x
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            gamma[ch] * (v - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch]
        })
        .collect();
    Arr {
        shape: x.shape.clone(),
        data,
    }
}

pub fn relu6(x: &Arr) -> Arr {
    Arr {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.clamp(0.0, 6.0)).collect(),
    }
}

pub fn gap(x: &Arr) -> Arr {
    let [n, h, w, c] = [x.shape[0], x.shape[1], x.shape[2], x.shape[3]];
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                for ch in 0..c {
                    out[b * c + ch] += x.at4(b, y, xx, ch) / (h * w) as f64;
                }
            }
        }
    }
    Arr {
        shape: vec![n, c],
        data: out,
    }
}

pub fn dense(x: &Arr, k: &[f64], bias: &[f64], fin: usize, fout: usize) -> Arr {
    let n = x.shape[0];
    let mut out = vec![0.0; n * fout];
    for b in 0..n {
        for o in 0..fout {
            let mut acc = bias[o];
            for i in 0..fin {
                acc += x.data[b * fin + i] * k[i * fout + o];
            }
            out[b * fout + o] = acc;
        }
    }
    Arr {
        shape: vec![n, fout],
        data: out,
    }
}

/// Mean categorical cross-entropy of `logits` against `labels`.
pub fn softmax_ce(logits: &Arr, labels: &[usize]) -> f64 {
    let k = logits.shape[1];
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data[b * k..(b + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_f64(store: &WeightStore) -> Params {
    store
        .iter()
        .map(|(k, v)| (k.to_string(), v.data().iter().map(|&x| x as f64).collect()))
        .collect()
}

/// Whole-network forward pass in `f64`, driven only by the layer descriptors.
pub fn network_forward(net: &Network, p: &Params, x: &Arr) -> Arr {
    forward_observed(net, p, x, &mut |_| {})
}

/// Which ReLU6 segment (below 0, linear, above 6) every activation falls in,
/// plus the network output.
pub fn forward_segments(net: &Network, p: &Params, x: &Arr) -> (Arr, Vec<u8>) {
    let mut seg = Vec::new();
    let out = forward_observed(net, p, x, &mut |pre| {
        seg.extend(pre.data.iter().map(|&v| (v > 0.0) as u8 + (v > 6.0) as u8));
    });
    (out, seg)
}

fn forward_observed(net: &Network, p: &Params, x: &Arr, on_relu: &mut dyn FnMut(&Arr)) -> Arr {
    let mut cur = x.clone();
    for layer in net.layers() {
        let get = |s: &str| p[&format!("{}/{s}", layer.name)].as_slice();
        cur = match layer.kind {
            LayerKind::Conv2d {
                kernel: [kh, kw],
                in_channels,
                out_channels,
                stride,
                padding,
                bias,
            } => conv2d(
                &cur,
                get("kernel"),
                [kh, kw, in_channels, out_channels],
                bias.then(|| get("bias")),
                stride,
                padding,
            ),
            LayerKind::Depthwise {
                kernel: [kh, kw],
                stride,
                padding,
                bias,
                ..
            } => depthwise(&cur, get("kernel"), kh, kw, bias.then(|| get("bias")), stride, padding),
            LayerKind::BatchNorm { epsilon, .. } => batchnorm(
                &cur,
                get("gamma"),
                get("beta"),
                get("moving_mean"),
                get("moving_variance"),
                epsilon as f64,
            ),
            LayerKind::Relu6 => {
                on_relu(&cur);
                relu6(&cur)
            }
            LayerKind::GlobalAvgPool => gap(&cur),
            LayerKind::Flatten => Arr {
                shape: vec![cur.shape[0], cur.data.len() / cur.shape[0]],
                data: cur.data,
            },
            LayerKind::Dense {
                in_features,
                out_features,
            } => dense(&cur, get("kernel"), get("bias"), in_features, out_features),
        };
    }
    cur
}

/// ‖a − b‖₂ / max(‖a‖₂, ‖b‖₂), zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Converts an 8-bit RGB image into an `H×W×3` tensor of raw pixel values.
pub fn rgb_tensor(img: &image::RgbImage) -> Tensor {
    let (w, h) = img.dimensions();
    Tensor::new(
        vec![h as usize, w as usize, 3],
        img.as_raw().iter().map(|&b| b as f32).collect(),
    )
    .unwrap()
}

/// A fresh draw of synthetic images, one class after another, preprocessed.
pub fn calibration_batch(seed: u64, per_class: usize, size: u32, pre: &Preprocessing) -> Tensor {
    let mut r = rng(seed);
    let images: Vec<Tensor> = (0..per_class * synth::DISEASE_CLASSES.len())
        .map(|i| pre.apply(&rgb_tensor(&synth::render_texture(i % synth::DISEASE_CLASSES.len(), size, &mut r))))
        .collect();
    Tensor::stack(&images).unwrap()
}

/// Seeded random backbone with batchnorm statistics calibrated on a
/// synthetic draw that shares no images with any corpus.
pub fn calibrated_weights(spec: &ModelSpec, seed: u64, pre: &Preprocessing) -> WeightStore {
    let store = dermanet::backbone::init_weights(spec, seed).unwrap();
    let batch = calibration_batch(seed ^ 0xCA1, 20, spec.input_size as u32, pre);
    dermanet::backbone::calibrate_batchnorm(&store, spec, &batch).unwrap()
}

pub fn write_synth_corpus(root: &Path, per_class: usize, size: u32, seed: u64) {
    let cfg = synth::SynthConfig {
        images_per_class: per_class,
        size,
        seed,
        ..Default::default()
    };
    synth::generate_corpus(root, &cfg).unwrap();
}

/// Two depthwise-separable blocks on a 6×6×3 input with a 3-class head and
/// non-trivial batchnorm statistics.
pub fn toy_network(seed: u64) -> (Network, WeightStore) {
    use dermanet::backbone::Layer;
    let conv = |name: &str, k: usize, cin: usize, cout: usize, stride: usize| {
        Layer::frozen(
            name,
            LayerKind::Conv2d {
                kernel: [k, k],
                in_channels: cin,
                out_channels: cout,
                stride,
                padding: Padding::Same,
                bias: false,
            },
        )
    };
    let dw = |name: &str, c: usize, stride: usize| {
        Layer::frozen(
            name,
            LayerKind::Depthwise {
                kernel: [3, 3],
                channels: c,
                stride,
                padding: Padding::Same,
                bias: false,
            },
        )
    };
    let bn = |name: &str, c: usize| Layer::frozen(name, LayerKind::BatchNorm { channels: c, epsilon: 1e-3 });
    let relu = || Layer::frozen("", LayerKind::Relu6);
    let layers = vec![
        conv("conv1", 3, 3, 4, 2),
        bn("conv1_bn", 4),
        relu(),
        dw("block1_dw", 4, 1),
        bn("block1_dw_bn", 4),
        relu(),
        conv("block1_pw", 1, 4, 6, 1),
        bn("block1_pw_bn", 6),
        relu(),
        dw("block2_dw", 6, 2),
        bn("block2_dw_bn", 6),
        relu(),
        conv("block2_pw", 1, 6, 8, 1),
        bn("block2_pw_bn", 8),
        relu(),
        Layer::frozen("", LayerKind::GlobalAvgPool),
        Layer::trainable(
            "head",
            LayerKind::Dense {
                in_features: 8,
                out_features: 3,
            },
        ),
    ];
    let net = Network::new([6, 6, 3], layers).unwrap();
    let mut store = net.init_weights(seed);
    let mut r = rng(seed ^ 0xB0);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let t = store.get_mut(&name).unwrap();
        let (lo, hi) = match name.rsplit('/').next().unwrap() {
            "gamma" => (0.5, 1.5),
            "beta" => (-0.3, 0.3),
            "moving_mean" => (-0.2, 0.2),
            "moving_variance" => (0.5, 1.5),
            "bias" => (-0.2, 0.2),
            _ => continue,
        };
        let shape = t.shape().to_vec();
        *t = Tensor::from_fn(&shape, |_| r.gen_range(lo..hi));
    }
    (net, store)
}

/// Norm-wise relative error between the analytic gradient of the mean
/// cross-entropy and central differences (`h = 1e-3`, all in `f64`), for every
/// parameter tensor and for the input, as `(name, error)` pairs.
///
/// Central differences are invalid where a step moves some ReLU6 input across
/// a kink; such coordinates are left out of both vectors. The last element of
/// the result is the fraction of coordinates skipped.
pub fn gradient_check(seed: u64) -> Vec<(String, f64)> {
    const H: f64 = 1e-3;
    let (net, store) = toy_network(seed);
    let mut r = rng(seed ^ 0x1A);
    let x = random_tensor(&[2, 6, 6, 3], 1.0, &mut r);
    let labels = [r.gen_range(0..3), r.gen_range(0..3)];

    let tape = net.forward_tape(&store, &x).unwrap();
    let probs = ops::softmax(&tape.output).unwrap();
    let g = ops::softmax_cross_entropy_backward(&probs, &ops::one_hot(&labels, 3).unwrap()).unwrap();
    let back = net.backward(&store, &tape, &g, true).unwrap();

    let params = params_f64(&store);
    let x64 = Arr::from_tensor(&x);
    let (_, base) = forward_segments(&net, &params, &x64);
    let (mut total, mut skipped) = (0usize, 0usize);
    // Loss at the perturbed point, or None if the segment pattern changed.
    let loss = |p: &Params, x: &Arr| {
        let (out, seg) = forward_segments(&net, p, x);
        (seg == base).then(|| softmax_ce(&out, &labels))
    };

    let mut out = Vec::new();
    let mut compare = |name: String, analytic: &[f64], fd: &[Option<f64>], out: &mut Vec<(String, f64)>| {
        let (a, f): (Vec<f64>, Vec<f64>) = analytic
            .iter()
            .zip(fd)
            .filter_map(|(&a, f)| f.map(|f| (a, f)))
            .unzip();
        total += fd.len();
        skipped += fd.len() - f.len();
        out.push((name, rel_err(&a, &f)));
    };
    for (name, values) in &params {
        let mut p = params.clone();
        let mut fd = Vec::with_capacity(values.len());
        for i in 0..values.len() {
            p.get_mut(name).unwrap()[i] = values[i] + H;
            let up = loss(&p, &x64);
            p.get_mut(name).unwrap()[i] = values[i] - H;
            let down = loss(&p, &x64);
            p.get_mut(name).unwrap()[i] = values[i];
            fd.push(up.zip(down).map(|(u, d)| (u - d) / (2.0 * H)));
        }
        let analytic: Vec<f64> = back.params[name].data().iter().map(|&v| v as f64).collect();
        compare(name.clone(), &analytic, &fd, &mut out);
    }
    let mut xp = x64.clone();
    let mut fd = Vec::with_capacity(x64.data.len());
    for i in 0..x64.data.len() {
        xp.data[i] = x64.data[i] + H;
        let up = loss(&params, &xp);
        xp.data[i] = x64.data[i] - H;
        let down = loss(&params, &xp);
        xp.data[i] = x64.data[i];
        fd.push(up.zip(down).map(|(u, d)| (u - d) / (2.0 * H)));
    }
    let analytic: Vec<f64> = back.input.data().iter().map(|&v| v as f64).collect();
    compare("input".into(), &analytic, &fd, &mut out);
    out.push(("skipped_fraction".into(), skipped as f64 / total as f64));
    out
}

/// Replaces batchnorm statistics and conv biases with seeded non-trivial
/// values so that folding has real work to do.
pub fn randomize_batchnorm(store: &mut WeightStore, seed: u64) {
    let mut r = rng(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in names {
        let (lo, hi) = match name.rsplit('/').next().unwrap() {
            "gamma" => (0.5, 1.5),
            "beta" => (-0.3, 0.3),
            "moving_mean" => (-0.2, 0.2),
            "moving_variance" => (0.5, 1.5),
            _ => continue,
        };
        let t = store.get_mut(&name).unwrap();
        let shape = t.shape().to_vec();
        *t = Tensor::from_fn(&shape, |_| r.gen_range(lo..hi));
    }
}

/// α=0.25, 32×32, 7-class checkpoint with a few Adam steps of history.
pub fn checkpoint_fixture(seed: u64) -> dermanet::export::Checkpoint {
    use dermanet::trainer::{Head, HeadTrainer, Hyperparams};
    let spec = ModelSpec::new(0.25, 32, 7);
    let mut weights = dermanet::backbone::init_weights(&spec, seed).unwrap();
    randomize_batchnorm(&mut weights, seed ^ 0xB7);
    let mut r = rng(seed ^ 0x77);
    let features = random_tensor(&[24, spec.feature_len()], 1.0, &mut r);
    let labels: Vec<usize> = (0..24).map(|i| i % 7).collect();
    let mut trainer = HeadTrainer::new(Head::from_store(&weights).unwrap(), Hyperparams::default()).unwrap();
    trainer.run_epoch(&features, &labels).unwrap();
    let (head, _) = trainer.finish();
    head.write_into(&mut weights);
    dermanet::export::Checkpoint {
        spec,
        weights,
        labels: synth::DISEASE_CLASSES.iter().map(|s| s.to_string()).collect(),
        preprocessing: Preprocessing::Default,
        hyperparams: Hyperparams::default(),
        kernel_state: head.kernel_state,
        bias_state: head.bias_state,
    }
}

pub fn close(got: &Tensor, want: &Arr, tol: f64) -> Result<(), String> {
    if got.shape() != want.shape.as_slice() {
        return Err(format!("shape {:?} vs {:?}", got.shape(), want.shape));
    }
    for (i, (&g, &w)) in got.data().iter().zip(&want.data).enumerate() {
        if (g as f64 - w).abs() > tol * w.abs().max(1.0) {
            return Err(format!("element {i}: {g} vs {w}"));
        }
    }
    Ok(())
}

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Random conv2d shapes against the loop oracle at 1e-6. Returns the case count.
pub fn conv2d_cases(seed: u64, cases: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let (kh, kw) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let stride = r.gen_range(1..=3);
        let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let h = r.gen_range(kh..kh + 7);
        let w = r.gen_range(kw..kw + 7);
        let (n, ci, co) = (r.gen_range(1..=3), r.gen_range(1..=4), r.gen_range(1..=5));
        let x = random_tensor(&[n, h, w, ci], 1.0, &mut r);
        let k = random_tensor(&[kh, kw, ci, co], 1.0 / ((kh * kw * ci) as f32).sqrt(), &mut r);
        let mut p = ConvParams::new(k.clone(), stride, padding);
        let bias = r.gen_bool(0.5).then(|| random_tensor(&[co], 0.5, &mut r));
        if let Some(b) = &bias {
            p = p.with_bias(b.clone());
        }
        let got = ops::conv2d(&x, &p).unwrap();
        let want = conv2d(
            &Arr::from_tensor(&x),
            &f64s(&k),
            [kh, kw, ci, co],
            bias.as_ref().map(f64s).as_deref(),
            stride,
            padding,
        );
        close(&got, &want, 1e-6).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(cases)
}

pub fn depthwise_cases(seed: u64, cases: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let (kh, kw) = (r.gen_range(1..=5), r.gen_range(1..=5));
        let stride = r.gen_range(1..=3);
        let padding = if r.gen_bool(0.5) { Padding::Same } else { Padding::Valid };
        let h = r.gen_range(kh..kh + 7);
        let w = r.gen_range(kw..kw + 7);
        let (n, c) = (r.gen_range(1..=3), r.gen_range(1..=6));
        let x = random_tensor(&[n, h, w, c], 1.0, &mut r);
        let k = random_tensor(&[kh, kw, c, 1], 0.5, &mut r);
        let bias = r.gen_bool(0.5).then(|| random_tensor(&[c], 0.5, &mut r));
        let mut p = ConvParams::new(k.clone(), stride, padding);
        if let Some(b) = &bias {
            p = p.with_bias(b.clone());
        }
        let got = ops::depthwise_conv2d(&x, &p).unwrap();
        let want = depthwise(
            &Arr::from_tensor(&x),
            &f64s(&k),
            kh,
            kw,
            bias.as_ref().map(f64s).as_deref(),
            stride,
            padding,
        );
        close(&got, &want, 1e-6).map_err(|e| format!("case {case}: {e}"))?;
    }
    Ok(cases)
}

/// Dense and pooling at 1e-6, conv → BN → ReLU6 chains at 1e-5.
pub fn dense_pool_bn_cases(seed: u64, cases: usize) -> Result<usize, String> {
    let mut r = rng(seed);
    for case in 0..cases {
        let (n, fin, fout) = (r.gen_range(1..=4), r.gen_range(1..=40), r.gen_range(1..=9));
        let x = random_tensor(&[n, fin], 1.0, &mut r);
        let k = random_tensor(&[fin, fout], 1.0 / (fin as f32).sqrt(), &mut r);
        let b = random_tensor(&[fout], 0.5, &mut r);
        let got = ops::dense(&x, &k, &b).unwrap();
        let want = dense(&Arr::from_tensor(&x), &f64s(&k), &f64s(&b), fin, fout);
        close(&got, &want, 1e-6).map_err(|e| format!("dense {case}: {e}"))?;

        let (h, w, c) = (r.gen_range(1..=7), r.gen_range(1..=7), r.gen_range(1..=5));
        let img = random_tensor(&[n, h, w, c], 2.0, &mut r);
        let got = ops::global_avg_pool(&img).unwrap();
        close(&got, &gap(&Arr::from_tensor(&img)), 1e-6).map_err(|e| format!("pool {case}: {e}"))?;

        let bn = BatchNormParams {
            gamma: Tensor::from_fn(&[c], |_| r.gen_range(0.5..1.5)),
            beta: random_tensor(&[c], 0.5, &mut r),
            running_mean: random_tensor(&[c], 0.5, &mut r),
            running_var: Tensor::from_fn(&[c], |_| r.gen_range(0.2..2.0)),
            epsilon: 1e-3,
        };
        // Conv → BN → ReLU6 chain, checked at the 1e-5 tolerance for BN chains.
        let k = random_tensor(&[3, 3, c, c], 0.3, &mut r);
        let y = ops::conv2d(&img, &ConvParams::new(k.clone(), 1, Padding::Same)).unwrap();
        let got = ops::relu6(&ops::batchnorm_infer(&y, &bn).unwrap());
        let want = relu6(&batchnorm(
            &conv2d(&Arr::from_tensor(&img), &f64s(&k), [3, 3, c, c], None, 1, Padding::Same),
            &f64s(&bn.gamma),
            &f64s(&bn.beta),
            &f64s(&bn.running_mean),
            &f64s(&bn.running_var),
            1e-3,
        ));
        close(&got, &want, 1e-5).map_err(|e| format!("bn chain {case}: {e}"))?;
    }
    Ok(cases)
}


/// Gaussian clusters around well-separated class means in `f` dimensions.
pub fn clusters(seed: u64, k: usize, per_class: usize, f: usize, spread: f32) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let means: Vec<Vec<f32>> = (0..k)
        .map(|_| (0..f).map(|_| if r.gen_bool(0.5) { 2.0 } else { -2.0 }).collect())
        .collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..k * per_class {
        let c = i % k;
        data.extend(means[c].iter().map(|&m| m + r.gen_range(-spread..spread)));
        labels.push(c);
    }
    (Tensor::new(vec![k * per_class, f], data).unwrap(), labels)
}

pub fn glorot_head(seed: u64, f: usize, k: usize) -> dermanet::trainer::Head {
    let bound = (6.0 / (f + k) as f32).sqrt();
    let mut r = rng(seed);
    dermanet::trainer::Head::new(random_tensor(&[f, k], bound, &mut r), Tensor::zeros(&[k])).unwrap()
}

/// Accuracy of the head computed with the `f64` dense oracle.
pub fn oracle_accuracy(head: &dermanet::trainer::Head, x: &Tensor, labels: &[usize]) -> f64 {
    let [n, f] = [x.shape()[0], x.shape()[1]];
    let k = head.num_classes();
    let w: Vec<f64> = head.kernel.data().iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = head.bias.data().iter().map(|&v| v as f64).collect();
    let logits = dense(&Arr::from_tensor(x), &w, &b, f, k);
    let correct = (0..n)
        .filter(|&i| {
            let row = &logits.data[i * k..(i + 1) * k];
            let best = (0..k).fold(0, |a, j| if row[j] > row[a] { j } else { a });
            best == labels[i]
        })
        .count();
    correct as f64 / n as f64
}
