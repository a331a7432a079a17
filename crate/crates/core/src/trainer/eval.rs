use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{forward, Architecture, ModelParams, Tensor};
use crate::error::Result;
use crate::synthdata::Dataset;

/// Accuracy of a model on a labelled set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_env: BTreeMap<usize, f64>,
    pub per_style: BTreeMap<usize, f64>,
    /// Held-out accuracy of a linear probe predicting `true_style` from
    /// frozen features; absent when the set carries no style ground truth.
    pub style_probe_accuracy: Option<f64>,
}

fn grouped_accuracy(keys: impl Iterator<Item = Option<usize>>, hits: &[bool]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (k, &hit) in keys.zip(hits) {
        if let Some(k) = k {
            let e = counts.entry(k).or_default();
            e.0 += usize::from(hit);
            e.1 += 1;
        }
    }
    counts.into_iter().map(|(k, (h, n))| (k, h as f64 / n as f64)).collect()
}

/// Top-1 accuracy overall, per ground-truth environment and per style.
pub fn accuracy_report(params: &ModelParams, arch: &Architecture, data: &Dataset) -> Result<(EvalReport, Tensor)> {
    let x = data.all_x()?;
    let (features, probs) = forward(params, arch, &x)?;
    let hits: Vec<bool> = probs
        .argmax_rows()
        .iter()
        .zip(&data.samples)
        .map(|(&p, s)| p == s.y)
        .collect();
    let accuracy = hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
    let report = EvalReport {
        accuracy,
        per_env: grouped_accuracy(data.samples.iter().map(|s| Some(s.true_env)), &hits),
        per_style: grouped_accuracy(data.samples.iter().map(|s| s.true_style), &hits),
        style_probe_accuracy: None,
    };
    Ok((report, features))
}

/// Accuracy plus the style probe on the model's frozen features.
pub fn evaluate(params: &ModelParams, arch: &Architecture, data: &Dataset) -> Result<EvalReport> {
    let (mut report, features) = accuracy_report(params, arch, data)?;
    let styles: Option<Vec<usize>> = data.samples.iter().map(|s| s.true_style).collect();
    report.style_probe_accuracy = styles.map(|t| probe_accuracy(&features, &t, &ProbeConfig::default()));
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            lr: 0.5,
            l2: 1e-4,
        }
    }
}

/// Multinomial logistic regression probe.
///
/// Features are standardized with training statistics, the probe is fit on
/// even-indexed rows by full-batch gradient descent from zero, and accuracy
/// is measured on odd-indexed rows.
pub fn probe_accuracy(features: &Tensor, targets: &[usize], cfg: &ProbeConfig) -> f64 {
    let n = features.rows();
    let d = features.row_len();
    let k = targets.iter().max().map_or(1, |m| m + 1).max(2);
    let train: Vec<usize> = (0..n).step_by(2).collect();
    let test: Vec<usize> = (1..n).step_by(2).collect();
    if train.is_empty() || test.is_empty() {
        return f64::NAN;
    }

    let mut mean = vec![0.0; d];
    let mut sd = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / train.len() as f64;
        }
    }
    for &i in &train {
        for ((s, m), v) in sd.iter_mut().zip(&mean).zip(features.row(i)) {
            *s += (v - m).powi(2) / train.len() as f64;
        }
    }
    let scale: Vec<f64> = sd.iter().map(|v| if *v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 }).collect();
    let standardized = |i: usize| -> Vec<f64> {
        features
            .row(i)
            .iter()
            .zip(&mean)
            .zip(&scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    };
    let xtr: Vec<Vec<f64>> = train.iter().map(|&i| standardized(i)).collect();

    let mut w = vec![0.0; d * k];
    let mut b = vec![0.0; k];
    let mut logits = vec![0.0; k];
    let scores = |w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]| {
        for (c, o) in out.iter_mut().enumerate() {
            *o = b[c] + x.iter().enumerate().map(|(j, v)| v * w[j * k + c]).sum::<f64>();
        }
    };
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d * k];
        let mut gb = vec![0.0; k];
        for (x, &i) in xtr.iter().zip(&train) {
            scores(&w, &b, x, &mut logits);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|z| (z - max).exp()).sum();
            for c in 0..k {
                let r = (logits[c] - max).exp() / total - if targets[i] == c { 1.0 } else { 0.0 };
                gb[c] += r;
                for (j, v) in x.iter().enumerate() {
                    gw[j * k + c] += r * v;
                }
            }
        }
        let m = train.len() as f64;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.lr * (g / m + cfg.l2 * *wi);
        }
        for (bi, g) in b.iter_mut().zip(&gb) {
            *bi -= cfg.lr * g / m;
        }
    }

    let hits = test
        .iter()
        .filter(|&&i| {
            scores(&w, &b, &standardized(i), &mut logits);
            let best = logits
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (c, &z)| if z > acc.1 { (c, z) } else { acc });
            best.0 == targets[i]
        })
        .count();
    hits as f64 / test.len() as f64
}
