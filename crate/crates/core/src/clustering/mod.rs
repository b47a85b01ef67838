//! Pseudo-domain labels from low-level feature statistics.

mod ddr;
mod dump;
mod kmeans;

pub use ddr::ddr;
pub use dump::{write_feature_dump, FeatureRow, FEATURE_DUMP_HEADER};
pub use kmeans::{offline_kmeans, KMeansResult, MAX_LLOYD_ITERATIONS};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Tap, TapStats};
use crate::tensor::ChannelStats;

/// Variances are floored here before the Bhattacharyya distance.
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const DEFAULT_ETA: f64 = 0.9;

/// A 1-D Gaussian given by mean and variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mean: f64,
    pub var: f64,
}

impl Gaussian {
    pub const fn new(mean: f64, var: f64) -> Self {
        Gaussian { mean, var }
    }

    pub fn from_std(mean: f64, std: f64) -> Self {
        Gaussian { mean, var: std * std }
    }

    pub fn std(self) -> f64 {
        self.var.sqrt()
    }
}

/// Bhattacharyya distance between two 1-D Gaussians:
/// `¼·ln(¼(σp²/σq² + σq²/σp² + 2)) + ¼·(μp−μq)²/(σp²+σq²)`.
pub fn bhattacharyya(p: Gaussian, q: Gaussian) -> Result<f64> {
    let vp = p.var.max(VARIANCE_FLOOR);
    let vq = q.var.max(VARIANCE_FLOOR);
    if !(vp > 0.0 && vq > 0.0) || !p.mean.is_finite() || !q.mean.is_finite() {
        return Err(Error::Domain(format!(
            "Bhattacharyya needs positive finite variances, got {} and {}",
            p.var, q.var
        )));
    }
    let shape = 0.25 * (0.25 * (vp / vq + vq / vp + 2.0)).ln();
    let location = 0.25 * (p.mean - q.mean).powi(2) / (vp + vq);
    Ok(shape + location)
}

/// 2-Wasserstein distance between two 1-D Gaussians.
pub fn wasserstein2(p: Gaussian, q: Gaussian) -> f64 {
    ((p.mean - q.mean).powi(2) + (p.std() - q.std()).powi(2)).sqrt()
}

/// Per-channel distance used to compare feature statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bhattacharyya,
    /// Euclidean distance on (mean, std); numerically equal to W₂ for 1-D Gaussians.
    Euclidean,
    /// Closed-form W₂ on (mean, std).
    Wasserstein2,
    /// `|Δμ| + |Δσ|` on (mean, std).
    StatsDivergence,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Bhattacharyya,
        Metric::Euclidean,
        Metric::Wasserstein2,
        Metric::StatsDivergence,
    ];

    pub const fn name(self) -> &'static str {
        match self {
            Metric::Bhattacharyya => "bhattacharyya",
            Metric::Euclidean => "euclidean",
            Metric::Wasserstein2 => "wasserstein2",
            Metric::StatsDivergence => "stats_divergence",
        }
    }

    pub fn channel(self, p: Gaussian, q: Gaussian) -> Result<f64> {
        Ok(match self {
            Metric::Bhattacharyya => bhattacharyya(p, q)?,
            Metric::Euclidean => ((p.mean - q.mean).powi(2) + (p.std() - q.std()).powi(2)).sqrt(),
            Metric::Wasserstein2 => wasserstein2(p, q),
            Metric::StatsDivergence => (p.mean - q.mean).abs() + (p.std() - q.std()).abs(),
        })
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric '{s}'")))
    }
}

/// Mean per-channel distance between two single-layer statistics.
pub fn stats_distance(a: &ChannelStats, b: &ChannelStats, metric: Metric) -> Result<f64> {
    if a.channels() != b.channels() || a.channels() == 0 {
        return Err(Error::InvalidFeature(format!(
            "channel counts {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    let mut total = 0.0;
    for c in 0..a.channels() {
        total += metric.channel(
            Gaussian::new(a.means[c], a.vars[c]),
            Gaussian::new(b.means[c], b.vars[c]),
        )?;
    }
    Ok(total / a.channels() as f64)
}

/// Stacked per-layer statistics of one sample: the clustering point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFeature {
    pub layers: Vec<ChannelStats>,
}

impl DomainFeature {
    pub fn new(layers: Vec<ChannelStats>) -> Self {
        DomainFeature { layers }
    }

    /// Feature of sample `n` over `layers`, in the given order.
    pub fn from_taps(taps: &TapStats, layers: &[Tap], n: usize) -> Result<Self> {
        let layers = layers
            .iter()
            .map(|t| {
                taps.get(t)
                    .and_then(|v| v.get(n))
                    .cloned()
                    .ok_or_else(|| Error::InvalidFeature(format!("no {t} statistics for sample {n}")))
            })
            .collect::<Result<_>>()?;
        Ok(DomainFeature { layers })
    }

    pub fn channels(&self) -> usize {
        self.layers.iter().map(ChannelStats::channels).sum()
    }

    fn same_layout(&self, other: &DomainFeature) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.channels() == b.channels())
    }

    /// `self ← η·self + (1−η)·other`, on means and variances.
    fn blend(&mut self, other: &DomainFeature, eta: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.means.iter_mut().zip(&b.means) {
                *x = eta * *x + (1.0 - eta) * y;
            }
            for (x, y) in a.vars.iter_mut().zip(&b.vars) {
                *x = eta * *x + (1.0 - eta) * y;
            }
        }
    }
}

/// Mean over every channel of every layer of the per-channel distance.
pub fn feature_distance(a: &DomainFeature, b: &DomainFeature, metric: Metric) -> Result<f64> {
    if !a.same_layout(b) || a.channels() == 0 {
        return Err(Error::InvalidFeature("feature layouts differ".into()));
    }
    let mut total = 0.0;
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        total += stats_distance(la, lb, metric)? * la.channels() as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Index of the smallest value; ties go to the lowest index.
pub(crate) fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Online clustering state: K EMA centroids seeded by the first K samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterBank {
    k: usize,
    eta: f64,
    metric: Metric,
    /// Seeded centroids; unseeded slots are absent.
    centroids: Vec<DomainFeature>,
    counts: Vec<u64>,
}

impl ClusterBank {
    pub fn new(k: usize, eta: f64, metric: Metric) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidConfig("cluster count K must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(Error::InvalidConfig(format!("eta {eta} outside [0, 1]")));
        }
        Ok(ClusterBank {
            k,
            eta,
            metric,
            centroids: Vec::with_capacity(k),
            counts: vec![0; k],
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn initialized(&self) -> usize {
        self.centroids.len()
    }

    pub fn centroids(&self) -> &[DomainFeature] {
        &self.centroids
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Distance to every centroid; unseeded slots are +∞.
    pub fn distances(&self, feature: &DomainFeature) -> Result<Vec<f64>> {
        let mut out = vec![f64::INFINITY; self.k];
        for (d, c) in out.iter_mut().zip(&self.centroids) {
            *d = feature_distance(feature, c, self.metric)?;
        }
        Ok(out)
    }

    /// Nearest seeded centroid without updating anything.
    pub fn nearest(&self, feature: &DomainFeature) -> Result<usize> {
        if self.centroids.is_empty() {
            return Err(Error::InvalidConfig("cluster bank has no seeded centroids".into()));
        }
        Ok(argmin(&self.distances(feature)?))
    }

    /// Seeds the next centroid while fewer than K exist; otherwise assigns the
    /// nearest centroid and moves it toward `feature` by EMA.
    pub fn assign_and_update(&mut self, feature: &DomainFeature) -> Result<usize> {
        if let Some(first) = self.centroids.first() {
            if !first.same_layout(feature) {
                return Err(Error::InvalidFeature("feature layout changed".into()));
            }
        }
        let label = if self.centroids.len() < self.k {
            self.centroids.push(feature.clone());
            self.centroids.len() - 1
        } else {
            let label = argmin(&self.distances(feature)?);
            self.centroids[label].blend(feature, self.eta);
            label
        };
        self.counts[label] += 1;
        Ok(label)
    }
}
