//! Unsupervised losses on softmax outputs and the source-similarity weight.
//!
//! Every loss returns one value per sample (mean over that sample's pixels)
//! and the gradient of each per-sample value w.r.t. the logits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Tap, TapStats};
use crate::par;
use crate::tensor::{ChannelStats, Real, Tensor};

pub const DEFAULT_DELTA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Entropy,
    MaxSquares,
    PseudoLabel,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Entropy, LossKind::MaxSquares, LossKind::PseudoLabel];

    pub const fn name(self) -> &'static str {
        match self {
            LossKind::Entropy => "entropy",
            LossKind::MaxSquares => "max_squares",
            LossKind::PseudoLabel => "pseudo_label",
        }
    }

    pub fn evaluate<T: Real>(self, probs: &Tensor<T>) -> LossOutput<T> {
        match self {
            LossKind::Entropy => entropy_loss(probs),
            LossKind::MaxSquares => max_squares_loss(probs),
            LossKind::PseudoLabel => pseudo_label_loss(probs),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss '{s}'")))
    }
}

/// Per-sample losses and `d loss_n / d logits` (sample n's slice only).
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub per_sample: Vec<f64>,
    pub grad_logits: Tensor<T>,
}

/// Runs `pixel(probs_at_pixel, grad_out)` for every pixel of every sample and
/// averages the returned values over the sample's pixels.
fn pixelwise<T: Real>(probs: &Tensor<T>, pixel: impl Fn(&[f64], &mut [f64]) -> f64 + Sync) -> LossOutput<T> {
    let s = probs.shape();
    let plane = s.plane();
    let inv = 1.0 / plane as f64;
    let per: Vec<(f64, Vec<T>)> = par::map_range(s.n, |n| {
        let sample = probs.sample(n);
        let mut grad = vec![T::zero(); s.sample_len()];
        let mut p = vec![0.0; s.c];
        let mut g = vec![0.0; s.c];
        let mut total = 0.0;
        for i in 0..plane {
            for c in 0..s.c {
                p[c] = sample[c * plane + i].f64();
            }
            total += pixel(&p, &mut g);
            for c in 0..s.c {
                grad[c * plane + i] = T::of(g[c] * inv);
            }
        }
        (total * inv, grad)
    });
    let mut per_sample = Vec::with_capacity(s.n);
    let mut data = Vec::with_capacity(s.len());
    for (l, g) in per {
        per_sample.push(l);
        data.extend(g);
    }
    LossOutput {
        per_sample,
        grad_logits: Tensor::from_vec(s, data).expect("shape preserved"),
    }
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Shannon entropy (natural log) per pixel.
pub fn entropy_loss<T: Real>(probs: &Tensor<T>) -> LossOutput<T> {
    pixelwise(probs, |p, g| {
        let h = -p.iter().map(|&v| xlogx(v)).sum::<f64>();
        for (g, &v) in g.iter_mut().zip(p) {
            *g = if v > 0.0 { -v * (v.ln() + h) } else { 0.0 };
        }
        h
    })
}

/// `−½ Σ_c p_c²` per pixel.
pub fn max_squares_loss<T: Real>(probs: &Tensor<T>) -> LossOutput<T> {
    pixelwise(probs, |p, g| {
        let sq: f64 = p.iter().map(|v| v * v).sum();
        for (g, &v) in g.iter_mut().zip(p) {
            *g = -v * (v - sq);
        }
        -0.5 * sq
    })
}

/// `⌈0.33·n⌉` in exact integer arithmetic.
pub fn kept_per_class(n: usize) -> usize {
    (33 * n).div_ceil(100)
}

/// Indices of the pixels kept as pseudo-labels for one sample: per predicted
/// class, the most confident `⌈0.33·n_class⌉` pixels. Confidence is the max
/// probability; ties keep the lower pixel index.
pub fn pseudo_label_selection(sample: &[f64], classes: usize) -> Vec<(usize, usize)> {
    let plane = sample.len() / classes;
    let mut by_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    for i in 0..plane {
        let mut best = 0;
        for c in 1..classes {
            if sample[c * plane + i] > sample[best * plane + i] {
                best = c;
            }
        }
        by_class[best].push((sample[best * plane + i], i));
    }
    let mut kept = Vec::new();
    for (c, mut pix) in by_class.into_iter().enumerate() {
        let keep = kept_per_class(pix.len());
        pix.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        kept.extend(pix.into_iter().take(keep).map(|(_, i)| (i, c)));
    }
    kept.sort_unstable();
    kept
}

/// Cross-entropy against hard argmax labels on the selected pixels only.
/// The labels are treated as constants.
pub fn pseudo_label_loss<T: Real>(probs: &Tensor<T>) -> LossOutput<T> {
    let s = probs.shape();
    let plane = s.plane();
    let per: Vec<(f64, Vec<T>)> = par::map_range(s.n, |n| {
        let sample: Vec<f64> = probs.sample(n).iter().map(|v| v.f64()).collect();
        let kept = pseudo_label_selection(&sample, s.c);
        let mut grad = vec![T::zero(); s.sample_len()];
        if kept.is_empty() {
            return (0.0, grad);
        }
        let inv = 1.0 / kept.len() as f64;
        let mut total = 0.0;
        for &(i, label) in &kept {
            total -= sample[label * plane + i].max(f64::MIN_POSITIVE).ln();
            for c in 0..s.c {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad[c * plane + i] = T::of((sample[c * plane + i] - onehot) * inv);
            }
        }
        (total * inv, grad)
    });
    let mut per_sample = Vec::with_capacity(s.n);
    let mut data = Vec::with_capacity(s.len());
    for (l, g) in per {
        per_sample.push(l);
        data.extend(g);
    }
    LossOutput {
        per_sample,
        grad_logits: Tensor::from_vec(s, data).expect("shape preserved"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub delta: f64,
    pub layers: Vec<Tap>,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            delta: DEFAULT_DELTA,
            layers: Tap::ALL.to_vec(),
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("denoise layer set is empty".into()));
        }
        Ok(())
    }
}

fn means_and_stds(s: &ChannelStats) -> Vec<f64> {
    s.means.iter().copied().chain(s.stds()).collect()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Per-sample mean over `cfg.layers` of cos([means ‖ stds], [source means ‖ source stds]).
pub fn denoise_weight(
    taps: &TapStats,
    source: &BTreeMap<Tap, ChannelStats>,
    cfg: &DenoiseConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut per_layer = Vec::with_capacity(cfg.layers.len());
    for tap in &cfg.layers {
        let samples = taps
            .get(tap)
            .ok_or_else(|| Error::InvalidConfig(format!("tap {tap} missing from statistics")))?;
        let src = source
            .get(tap)
            .ok_or_else(|| Error::InvalidConfig(format!("no source statistics for {tap}")))?;
        let reference = means_and_stds(src);
        let mut sims = Vec::with_capacity(samples.len());
        for s in samples {
            if s.channels() != src.channels() {
                return Err(Error::InvalidFeature(format!(
                    "tap {tap}: {} channels vs {} in source",
                    s.channels(),
                    src.channels()
                )));
            }
            sims.push(cosine(&means_and_stds(s), &reference));
        }
        per_layer.push(sims);
    }
    let n = per_layer[0].len();
    if per_layer.iter().any(|l| l.len() != n) {
        return Err(Error::InvalidFeature("taps disagree on sample count".into()));
    }
    let layers = per_layer.len() as f64;
    Ok((0..n).map(|i| per_layer.iter().map(|l| l[i]).sum::<f64>() / layers).collect())
}

/// `clamp(w, 0, 1)^δ`, with `0^0 = 1`.
pub fn weight_scale(w: f64, delta: f64) -> f64 {
    w.clamp(0.0, 1.0).powf(delta)
}

/// Batch objective `mean_n(clamp(w_n)^δ · loss_n)` and the per-sample factors
/// `clamp(w_n)^δ` that scale each sample's gradient.
pub fn weighted_objective(losses: &[f64], weights: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    if losses.len() != weights.len() {
        return Err(Error::InvalidShape(format!(
            "{} losses vs {} weights",
            losses.len(),
            weights.len()
        )));
    }
    if losses.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let scales: Vec<f64> = weights.iter().map(|&w| weight_scale(w, delta)).collect();
    let total: f64 = losses.iter().zip(&scales).map(|(l, s)| l * s).sum();
    Ok((total / losses.len() as f64, scales))
}

/// Gradient of `mean_n(scale_n · loss_n)` w.r.t. the logits.
pub fn scale_gradient<T: Real>(grad: &Tensor<T>, scales: &[f64]) -> Result<Tensor<T>> {
    let s = grad.shape();
    if scales.len() != s.n {
        return Err(Error::InvalidShape(format!("{} scales for {} samples", scales.len(), s.n)));
    }
    let mut out = grad.clone();
    let n = s.n as f64;
    for (chunk, scale) in out.data_mut().chunks_mut(s.sample_len().max(1)).zip(scales) {
        let k = T::of(scale / n);
        chunk.iter_mut().for_each(|v| *v = *v * k);
    }
    Ok(out)
}

/// Per-sample mean over pixels of the max class probability.
pub fn mean_max_probability<T: Real>(probs: &Tensor<T>) -> Vec<f64> {
    let s = probs.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            let sample = probs.sample(n);
            let total: f64 = (0..plane)
                .map(|i| (0..s.c).map(|c| sample[c * plane + i].f64()).fold(f64::MIN, f64::max))
                .sum();
            total / plane as f64
        })
        .collect()
}
