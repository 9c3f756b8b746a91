//! Layer primitives with forward and backward passes.
//!
//! Everything operates on NHWC tensors. Reductions accumulate in `f64` and the
//! result is rounded back to `f32`. Per-sample work is spread over rayon
//! workers; every output element is produced by exactly one worker in a fixed
//! summation order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding so that `out = ceil(in / stride)`. Odd padding puts the
    /// extra row/column at the bottom/right.
    Same,
    Valid,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `kh×kw×c_in×c_out` for standard convolution, `kh×kw×c×1` for depthwise.
    pub kernel: Tensor,
    pub stride: usize,
    pub padding: Padding,
    pub bias: Option<Tensor>,
}

impl ConvParams {
    pub fn new(kernel: Tensor, stride: usize, padding: Padding) -> Self {
        Self {
            kernel,
            stride,
            padding,
            bias: None,
        }
    }

    pub fn with_bias(mut self, bias: Tensor) -> Self {
        self.bias = Some(bias);
        self
    }

    fn kernel_dims(&self) -> Result<[usize; 4]> {
        let [kh, kw, ci, co] = match self.kernel.shape()[..] {
            [a, b, c, d] => [a, b, c, d],
            _ => {
                return Err(shape_err!(
                    "kernel must be rank 4 (kh×kw×c_in×c_out), got {:?}",
                    self.kernel.shape()
                ))
            }
        };
        if kh == 0 || kw == 0 {
            return Err(shape_err!("kernel spatial dims must be ≥ 1"));
        }
        if self.stride == 0 {
            return Err(shape_err!("stride must be ≥ 1"));
        }
        Ok([kh, kw, ci, co])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f32,
}

impl BatchNormParams {
    /// gamma=1, beta=0, mean=0, var=1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            epsilon,
        }
    }

    fn channels(&self) -> Result<usize> {
        let c = self.gamma.len();
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.len() != c {
                return Err(shape_err!("batchnorm {name} has {} entries, gamma has {c}", t.len()));
            }
        }
        Ok(c)
    }

    /// Per-channel `(scale, shift)` such that `out = x·scale + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.gamma.len())
            .map(|c| {
                let inv = 1.0
                    / (self.running_var.data()[c] as f64 + self.epsilon as f64).sqrt();
                let scale = self.gamma.data()[c] as f64 * inv;
                let shift = self.beta.data()[c] as f64 - self.running_mean.data()[c] as f64 * scale;
                (scale, shift)
            })
            .collect()
    }
}

/// A gradient tagged with the parameter (or `"input"`) it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub with_respect_to: String,
    pub value: Tensor,
}

/// Output extent and leading pad for one spatial axis.
pub fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(shape_err!(
                    "valid padding needs input extent {input} ≥ kernel extent {kernel}"
                ));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
    stride: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<(Self, usize)> {
        let [n, h, w, c] = input.dims4()?;
        let (oh, pad_top) = output_extent(h, kh, stride, padding)?;
        let (ow, pad_left) = output_extent(w, kw, stride, padding)?;
        Ok((
            Self {
                n,
                h,
                w,
                oh,
                ow,
                pad_top,
                pad_left,
                stride,
            },
            c,
        ))
    }

    /// Input coordinate for an output position and kernel tap, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Standard 2-D cross-correlation.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let [kh, kw, cin, cout] = p.kernel_dims()?;
    let (g, c) = ConvGeometry::new(input, kh, kw, p.stride, p.padding)?;
    if c != cin {
        return Err(shape_err!("conv2d: input has {c} channels, kernel expects {cin}"));
    }
    let bias = check_bias(p, cout)?;
    let kernel = p.kernel.data();
    let in_per = g.h * g.w * cin;
    let out_per = g.oh * g.ow * cout;
    let mut out = vec![0.0f32; g.n * out_per];
    out.par_chunks_mut(out_per.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let x = &input.data()[n * in_per..(n + 1) * in_per];
            let mut acc = vec![0.0f64; cout];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    acc.iter_mut().zip(bias.iter()).for_each(|(a, b)| *a = *b);
                    for ky in 0..kh {
                        let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                            let px = &x[(iy * g.w + ix) * cin..][..cin];
                            let taps = &kernel[(ky * kw + kx) * cin * cout..][..cin * cout];
                            for (ci, &xv) in px.iter().enumerate() {
                                let xv = xv as f64;
                                let row = &taps[ci * cout..][..cout];
                                for (a, &k) in acc.iter_mut().zip(row) {
                                    *a += xv * k as f64;
                                }
                            }
                        }
                    }
                    let dst = &mut out_n[(oy * g.ow + ox) * cout..][..cout];
                    for (d, a) in dst.iter_mut().zip(&acc) {
                        *d = *a as f32;
                    }
                }
            }
        });
    Tensor::new(vec![g.n, g.oh, g.ow, cout], out)
}

/// Per-channel spatial convolution: output channel `k` reads only input channel `k`.
pub fn depthwise_conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let [kh, kw, kc, mult] = p.kernel_dims()?;
    if mult != 1 {
        return Err(shape_err!("depthwise kernel must have one filter per channel, got multiplier {mult}"));
    }
    let (g, c) = ConvGeometry::new(input, kh, kw, p.stride, p.padding)?;
    if c != kc {
        return Err(shape_err!("depthwise_conv2d: input has {c} channels, kernel has {kc}"));
    }
    let bias = check_bias(p, c)?;
    let kernel = p.kernel.data();
    let in_per = g.h * g.w * c;
    let out_per = g.oh * g.ow * c;
    let mut out = vec![0.0f32; g.n * out_per];
    out.par_chunks_mut(out_per.max(1))
        .enumerate()
        .for_each(|(n, out_n)| {
            let x = &input.data()[n * in_per..(n + 1) * in_per];
            let mut acc = vec![0.0f64; c];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    acc.copy_from_slice(&bias);
                    for ky in 0..kh {
                        let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                            let px = &x[(iy * g.w + ix) * c..][..c];
                            let taps = &kernel[(ky * kw + kx) * c..][..c];
                            for ((a, &xv), &k) in acc.iter_mut().zip(px).zip(taps) {
                                *a += xv as f64 * k as f64;
                            }
                        }
                    }
                    let dst = &mut out_n[(oy * g.ow + ox) * c..][..c];
                    for (d, a) in dst.iter_mut().zip(&acc) {
                        *d = *a as f32;
                    }
                }
            }
        });
    Tensor::new(vec![g.n, g.oh, g.ow, c], out)
}

fn check_bias(p: &ConvParams, channels: usize) -> Result<Vec<f64>> {
    match &p.bias {
        Some(b) if b.len() != channels => Err(shape_err!(
            "bias has {} entries for {channels} output channels",
            b.len()
        )),
        Some(b) => Ok(b.data().iter().map(|&v| v as f64).collect()),
        None => Ok(vec![0.0; channels]),
    }
}

/// Inference-mode batch normalization over the last axis.
pub fn batchnorm_infer(input: &Tensor, p: &BatchNormParams) -> Result<Tensor> {
    let c = p.channels()?;
    let last = *input.shape().last().unwrap_or(&0);
    if last != c {
        return Err(shape_err!("batchnorm: input has {last} channels, parameters have {c}"));
    }
    let affine = p.affine();
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let (scale, shift) = affine[i % c];
            (x as f64 * scale + shift) as f32
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn relu6(input: &Tensor) -> Tensor {
    input.map(|x| x.clamp(0.0, 6.0))
}

/// `N×H×W×C → N×C` spatial mean.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = input.dims4()?;
    if h == 0 || w == 0 {
        return Err(shape_err!("global_avg_pool needs non-empty spatial dims"));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    for s in 0..n {
        let x = input.sample(s);
        let mut acc = vec![0.0f64; c];
        for px in x.chunks_exact(c) {
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v as f64;
            }
        }
        out.extend(acc.iter().map(|a| (a / hw as f64) as f32));
    }
    Tensor::new(vec![n, c], out)
}

/// `out = input·weights + bias` for `input: N×F`, `weights: F×K`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, f] = input.dims2()?;
    let [wf, k] = weights.dims2()?;
    if f != wf {
        return Err(shape_err!("dense: input has {f} features, weights expect {wf}"));
    }
    if bias.len() != k {
        return Err(shape_err!("dense: bias has {} entries for {k} outputs", bias.len()));
    }
    let w = weights.data();
    let mut out = Vec::with_capacity(n * k);
    let mut acc = vec![0.0f64; k];
    for s in 0..n {
        acc.iter_mut()
            .zip(bias.data())
            .for_each(|(a, &b)| *a = b as f64);
        for (fi, &xv) in input.sample(s).iter().enumerate() {
            let xv = xv as f64;
            for (a, &wv) in acc.iter_mut().zip(&w[fi * k..(fi + 1) * k]) {
                *a += xv * wv as f64;
            }
        }
        out.extend(acc.iter().map(|&a| a as f32));
    }
    Tensor::new(vec![n, k], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let [n, k] = logits.dims2()?;
    if k == 0 {
        return Err(shape_err!("softmax needs at least one class"));
    }
    let mut out = Vec::with_capacity(n * k);
    for s in 0..n {
        let row = logits.sample(s);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| (e / sum) as f32));
    }
    Tensor::new(vec![n, k], out)
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-Σ y·ln(max(p, 1e-12))`.
pub fn cross_entropy(probs: &Tensor, one_hot: &Tensor) -> Result<f32> {
    let [n, k] = probs.dims2()?;
    if one_hot.shape() != probs.shape() {
        return Err(shape_err!(
            "cross_entropy: targets {:?} vs probabilities {:?}",
            one_hot.shape(),
            probs.shape()
        ));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0f64;
    for (p, y) in probs.data().chunks_exact(k).zip(one_hot.data().chunks_exact(k)) {
        for (&pv, &yv) in p.iter().zip(y) {
            if yv != 0.0 {
                total -= yv as f64 * (pv as f64).max(PROB_FLOOR).ln();
            }
        }
    }
    Ok((total / n as f64) as f32)
}

/// One-hot matrix for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(crate::Error::ClassIndex {
                index: l,
                bound: classes,
            });
        }
        t.data_mut()[i * classes + l] = 1.0;
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Backward passes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let [kh, kw, cin, cout] = p.kernel_dims()?;
    let (g, c) = ConvGeometry::new(input, kh, kw, p.stride, p.padding)?;
    if c != cin || grad_out.shape() != [g.n, g.oh, g.ow, cout] {
        return Err(shape_err!(
            "conv2d_backward: grad {:?} does not match forward geometry",
            grad_out.shape()
        ));
    }
    let kernel = p.kernel.data();
    let in_per = g.h * g.w * cin;
    let out_per = g.oh * g.ow * cout;
    let ksize = kh * kw * cin * cout;

    let per_sample: Vec<(Vec<f32>, Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x = &input.data()[n * in_per..(n + 1) * in_per];
            let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
            let mut gx = vec![0.0f64; in_per];
            let mut gk = vec![0.0f64; ksize];
            let mut gb = vec![0.0f64; cout];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = &go[(oy * g.ow + ox) * cout..][..cout];
                    for (b, &v) in gb.iter_mut().zip(gy) {
                        *b += v as f64;
                    }
                    for ky in 0..kh {
                        let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                            let base = (iy * g.w + ix) * cin;
                            let tap = (ky * kw + kx) * cin * cout;
                            for ci in 0..cin {
                                let xv = x[base + ci] as f64;
                                let row = &kernel[tap + ci * cout..][..cout];
                                let grow = &mut gk[tap + ci * cout..][..cout];
                                let mut sx = 0.0f64;
                                for ((gkv, &k), &gv) in grow.iter_mut().zip(row).zip(gy) {
                                    let gv = gv as f64;
                                    *gkv += xv * gv;
                                    sx += k as f64 * gv;
                                }
                                gx[base + ci] += sx;
                            }
                        }
                    }
                }
            }
            (gx.into_iter().map(|v| v as f32).collect(), gk, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(g.n * in_per);
    let mut gk = vec![0.0f64; ksize];
    let mut gb = vec![0.0f64; cout];
    for (sx, sk, sb) in per_sample {
        gx.extend(sx);
        gk.iter_mut().zip(&sk).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&sb).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        kernel: Tensor::new(p.kernel.shape().to_vec(), to_f32(gk))?,
        bias: p.bias.as_ref().map(|_| Tensor::new(vec![cout], to_f32(gb))).transpose()?,
    })
}

pub fn depthwise_conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    let [kh, kw, kc, _] = p.kernel_dims()?;
    let (g, c) = ConvGeometry::new(input, kh, kw, p.stride, p.padding)?;
    if c != kc || grad_out.shape() != [g.n, g.oh, g.ow, c] {
        return Err(shape_err!(
            "depthwise_conv2d_backward: grad {:?} does not match forward geometry",
            grad_out.shape()
        ));
    }
    let kernel = p.kernel.data();
    let in_per = g.h * g.w * c;
    let out_per = g.oh * g.ow * c;
    let ksize = kh * kw * c;

    let per_sample: Vec<(Vec<f32>, Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let x = &input.data()[n * in_per..(n + 1) * in_per];
            let go = &grad_out.data()[n * out_per..(n + 1) * out_per];
            let mut gx = vec![0.0f64; in_per];
            let mut gk = vec![0.0f64; ksize];
            let mut gb = vec![0.0f64; c];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = &go[(oy * g.ow + ox) * c..][..c];
                    for (b, &v) in gb.iter_mut().zip(gy) {
                        *b += v as f64;
                    }
                    for ky in 0..kh {
                        let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                        for kx in 0..kw {
                            let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                            let base = (iy * g.w + ix) * c;
                            let tap = (ky * kw + kx) * c;
                            for ch in 0..c {
                                let gv = gy[ch] as f64;
                                gk[tap + ch] += x[base + ch] as f64 * gv;
                                gx[base + ch] += kernel[tap + ch] as f64 * gv;
                            }
                        }
                    }
                }
            }
            (gx.into_iter().map(|v| v as f32).collect(), gk, gb)
        })
        .collect();

    let mut gx = Vec::with_capacity(g.n * in_per);
    let mut gk = vec![0.0f64; ksize];
    let mut gb = vec![0.0f64; c];
    for (sx, sk, sb) in per_sample {
        gx.extend(sx);
        gk.iter_mut().zip(&sk).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(&sb).for_each(|(a, b)| *a += b);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        kernel: Tensor::new(p.kernel.shape().to_vec(), to_f32(gk))?,
        bias: p.bias.as_ref().map(|_| Tensor::new(vec![c], to_f32(gb))).transpose()?,
    })
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

pub fn batchnorm_backward(input: &Tensor, p: &BatchNormParams, grad_out: &Tensor) -> Result<BatchNormGrads> {
    let c = p.channels()?;
    if grad_out.shape() != input.shape() || input.shape().last() != Some(&c) {
        return Err(shape_err!("batchnorm_backward: shapes do not line up"));
    }
    let mut gx = Vec::with_capacity(input.len());
    let mut g_gamma = vec![0.0f64; c];
    let mut g_beta = vec![0.0f64; c];
    let mut g_mean = vec![0.0f64; c];
    let mut g_var = vec![0.0f64; c];
    let stats: Vec<(f64, f64, f64, f64)> = (0..c)
        .map(|ch| {
            let var = p.running_var.data()[ch] as f64 + p.epsilon as f64;
            let inv = 1.0 / var.sqrt();
            (p.gamma.data()[ch] as f64, p.running_mean.data()[ch] as f64, inv, var)
        })
        .collect();
    for (i, (&x, &g)) in input.data().iter().zip(grad_out.data()).enumerate() {
        let ch = i % c;
        let (gamma, mean, inv, var) = stats[ch];
        let (x, g) = (x as f64, g as f64);
        let centered = x - mean;
        gx.push((g * gamma * inv) as f32);
        g_gamma[ch] += g * centered * inv;
        g_beta[ch] += g;
        g_mean[ch] -= g * gamma * inv;
        g_var[ch] += g * gamma * centered * -0.5 * inv / var;
    }
    Ok(BatchNormGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        gamma: Tensor::new(vec![c], to_f32(g_gamma))?,
        beta: Tensor::new(vec![c], to_f32(g_beta))?,
        running_mean: Tensor::new(vec![c], to_f32(g_mean))?,
        running_var: Tensor::new(vec![c], to_f32(g_var))?,
    })
}

/// Gradient passes where `0 < x < 6`.
pub fn relu6_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(shape_err!("relu6_backward: shapes differ"));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 && x < 6.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [n, h, w, c] = match input_shape[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => return Err(shape_err!("global_avg_pool_backward needs an NHWC shape")),
    };
    if grad_out.shape() != [n, c] {
        return Err(shape_err!("global_avg_pool_backward: grad {:?} vs N×C", grad_out.shape()));
    }
    let scale = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(n * h * w * c);
    for s in 0..n {
        let g: Vec<f32> = grad_out
            .sample(s)
            .iter()
            .map(|&v| (v as f64 * scale) as f32)
            .collect();
        for _ in 0..h * w {
            out.extend_from_slice(&g);
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<DenseGrads> {
    let [n, f] = input.dims2()?;
    let [_, k] = weights.dims2()?;
    if grad_out.shape() != [n, k] {
        return Err(shape_err!("dense_backward: grad {:?} vs {n}×{k}", grad_out.shape()));
    }
    let w = weights.data();
    let mut gw = vec![0.0f64; f * k];
    let mut gb = vec![0.0f64; k];
    let mut gx = Vec::with_capacity(n * f);
    for s in 0..n {
        let x = input.sample(s);
        let g = grad_out.sample(s);
        for (b, &gv) in gb.iter_mut().zip(g) {
            *b += gv as f64;
        }
        for (fi, &xv) in x.iter().enumerate() {
            let xv = xv as f64;
            let mut sx = 0.0f64;
            for ((gwv, &wv), &gv) in gw[fi * k..(fi + 1) * k].iter_mut().zip(&w[fi * k..]).zip(g) {
                *gwv += xv * gv as f64;
                sx += wv as f64 * gv as f64;
            }
            gx.push(sx as f32);
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![n, f], gx)?,
        weights: Tensor::new(vec![f, k], to_f32(gw))?,
        bias: Tensor::new(vec![k], to_f32(gb))?,
    })
}

/// Gradient of the batch-mean cross-entropy with respect to the logits:
/// `(softmax(logits) − one_hot) / N`.
pub fn softmax_cross_entropy_backward(probs: &Tensor, one_hot: &Tensor) -> Result<Tensor> {
    let [n, _] = probs.dims2()?;
    if probs.shape() != one_hot.shape() {
        return Err(shape_err!("softmax_cross_entropy_backward: shapes differ"));
    }
    let inv_n = 1.0 / n.max(1) as f64;
    let data = probs
        .data()
        .iter()
        .zip(one_hot.data())
        .map(|(&p, &y)| ((p as f64 - y as f64) * inv_n) as f32)
        .collect();
    Tensor::new(probs.shape().to_vec(), data)
}

fn to_f32(v: Vec<f64>) -> Vec<f32> {
    v.into_iter().map(|x| x as f32).collect()
}
