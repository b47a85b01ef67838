//! Offline diagnostics over a labeled split: DDR per tap and metric, and
//! per-sample quality signals against pixel accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{ddr, Metric};
use crate::error::{Error, Result};
use crate::losses::{denoise_weight, entropy_loss, mean_max_probability, DenoiseConfig};
use crate::metrics::{pearson, pixel_accuracy};
use crate::network::{argmax_labels, SegNet, Tap, TapStats};
use crate::par;
use crate::synth::Stream;
use crate::tensor::ChannelStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DdrRow {
    pub layer: Tap,
    pub metric: Metric,
    pub value: f64,
}

/// Per-sample tap statistics of a split, each sample forwarded alone.
pub fn sample_taps(net: &SegNet<f32>, split: &Stream, branch: usize) -> Result<Vec<TapStats>> {
    par::map_range(split.len(), |i| net.tap_statistics(&split.images.images[i], branch, &Tap::ALL))
        .into_iter()
        .collect()
}

/// DDR for every tap × metric, grouping samples by true domain.
pub fn ddr_grid(taps: &[TapStats], domains: &[Option<usize>]) -> Result<Vec<DdrRow>> {
    if taps.len() != domains.len() {
        return Err(Error::InvalidShape(format!("{} samples vs {} domain labels", taps.len(), domains.len())));
    }
    let mut rows = Vec::with_capacity(Tap::ALL.len() * Metric::ALL.len());
    for layer in Tap::ALL {
        let mut by_domain: BTreeMap<usize, Vec<ChannelStats>> = BTreeMap::new();
        for (i, (t, d)) in taps.iter().zip(domains).enumerate() {
            let d = d.ok_or_else(|| Error::Data(format!("sample {i} has no true domain")))?;
            by_domain.entry(d).or_default().push(t[&layer][0].clone());
        }
        for metric in Metric::ALL {
            rows.push(DdrRow {
                layer,
                metric,
                value: ddr(&by_domain, metric)?,
            });
        }
    }
    Ok(rows)
}

/// Quality signals of one sample under a single-sample α-BN forward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleSignals {
    /// Denoising weight before the δ exponent.
    pub weight: f64,
    pub mean_probability: f64,
    /// Mean pixel entropy.
    pub entropy: f64,
    pub accuracy: f64,
}

pub fn sample_signals(
    net: &SegNet<f32>,
    split: &Stream,
    branch: usize,
    denoise: &DenoiseConfig,
) -> Result<Vec<SampleSignals>> {
    denoise.validate()?;
    let source = net.source_stats();
    par::map_range(split.len(), |i| {
        let pass = net.forward_with_taps(&split.images.images[i], branch)?;
        Ok(SampleSignals {
            weight: denoise_weight(&pass.taps, &source, denoise)?[0],
            mean_probability: mean_max_probability(&pass.probs)[0],
            entropy: entropy_loss(&pass.probs).per_sample[0],
            accuracy: pixel_accuracy(&argmax_labels(&pass.probs)[0], &split.eval.labels[i])?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub signal: String,
    /// `None` when either series has zero variance.
    pub pearson: Option<f64>,
}

/// Pearson correlation of each signal with per-sample accuracy.
pub fn correlation_table(signals: &[SampleSignals]) -> Result<Vec<CorrelationRow>> {
    let acc: Vec<f64> = signals.iter().map(|s| s.accuracy).collect();
    let series: [(&str, fn(&SampleSignals) -> f64); 3] = [
        ("weight", |s| s.weight),
        ("mean_probability", |s| s.mean_probability),
        ("entropy", |s| s.entropy),
    ];
    series
        .iter()
        .map(|(name, get)| {
            let x: Vec<f64> = signals.iter().map(get).collect();
            let pearson = match pearson(&x, &acc) {
                Ok(r) => Some(r),
                Err(Error::UndefinedMetric(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(CorrelationRow {
                signal: name.to_string(),
                pearson,
            })
        })
        .collect()
}
