//! Confusion matrices, rank-1 accuracy and per-class accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows are true classes, columns are predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

pub fn confusion(pred: &[usize], truth: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&p, &t) in pred.iter().zip(truth) {
        for idx in [p, t] {
            if idx >= k {
                return Err(Error::ClassIndex { index: idx, bound: k });
            }
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: (0..k).map(|i| i.to_string()).collect(),
    })
}

impl ConfusionMatrix {
    pub fn with_names(mut self, names: &[String]) -> Result<Self> {
        if names.len() != self.counts.len() {
            return Err(Error::Shape(format!(
                "{} class names for a {}-class matrix",
                names.len(),
                self.counts.len()
            )));
        }
        self.class_names = names.to_vec();
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Rows divided by their sums. Empty rows come back as zeros.
    pub fn normalize(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let sum: u64 = row.iter().sum();
                if sum == 0 {
                    log::warn!("class {} has no evaluated samples", self.class_names[i]);
                    vec![0.0; row.len()]
                } else {
                    row.iter().map(|&c| c as f64 / sum as f64).collect()
                }
            })
            .collect()
    }

    pub fn rank1_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Dataset("accuracy of an empty confusion matrix".into()));
        }
        Ok(self.trace() as f64 / total as f64)
    }

    /// Recall per true class (the normalized diagonal); zero for empty rows.
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let sum: u64 = row.iter().sum();
                if sum == 0 {
                    0.0
                } else {
                    row[i] as f64 / sum as f64
                }
            })
            .collect()
    }

    /// Counts and row-normalized percentages as aligned text tables.
    pub fn render_text(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(String::len)
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = String::new();
        let header = |out: &mut String| {
            out.push_str(&format!("{:>width$} |", "true\\pred"));
            for name in &self.class_names {
                out.push_str(&format!(" {:>width$}", name));
            }
            out.push('\n');
        };
        out.push_str("Confusion matrix (counts)\n");
        header(&mut out);
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            out.push_str(&format!("{:>width$} |", name));
            for c in row {
                out.push_str(&format!(" {:>width$}", c));
            }
            out.push('\n');
        }
        out.push_str("\nNormalized confusion matrix (row %)\n");
        header(&mut out);
        for (name, row) in self.class_names.iter().zip(self.normalize()) {
            out.push_str(&format!("{:>width$} |", name));
            for v in row {
                out.push_str(&format!(" {:>width$.1}", v * 100.0));
            }
            out.push('\n');
        }
        out
    }

    /// Heat table of the normalized matrix as PNG: one square cell per entry,
    /// white (0) to dark blue (1).
    pub fn render_png(&self, cell: u32) -> Result<Vec<u8>> {
        let k = self.num_classes() as u32;
        let norm = self.normalize();
        let img = image::RgbImage::from_fn(k * cell, k * cell, |x, y| {
            let v = norm[(y / cell) as usize][(x / cell) as usize];
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * v).round() as u8;
            image::Rgb([shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)])
        });
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of an `N×K` score matrix.
pub fn predictions(scores: &Tensor) -> Result<Vec<usize>> {
    let [n, _] = scores.dims2()?;
    Ok((0..n).map(|i| argmax(scores.sample(i))).collect())
}

/// `P(X ≥ successes)` for `X ~ Binomial(trials, p)`, summed in log space.
pub fn binomial_upper_tail(successes: u64, trials: u64, p: f64) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    let ln_fact = |n: u64| -> f64 { (1..=n).map(|i| (i as f64).ln()).sum() };
    let ln_n = ln_fact(trials);
    let (lp, lq) = (p.ln(), (1.0 - p).ln());
    let terms: Vec<f64> = (successes..=trials)
        .map(|k| ln_n - ln_fact(k) - ln_fact(trials - k) + k as f64 * lp + (trials - k) as f64 * lq)
        .collect();
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    (max + sum.ln()).exp().min(1.0)
}
