use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmin, feature_distance, DomainFeature, Metric};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::ChannelStats;

pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<DomainFeature>,
    pub iterations: usize,
}

/// Batch k-means over domain features: k-means++ seeding from `seed`,
/// metric-based assignment, arithmetic-mean centroids.
pub fn offline_kmeans(
    features: &[DomainFeature],
    k: usize,
    metric: Metric,
    seed: u64,
) -> Result<KMeansResult> {
    if k == 0 || features.len() < k {
        return Err(Error::InvalidConfig(format!(
            "k-means needs 1 <= K <= #features, got K={k} for {} features",
            features.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![features[rng.random_range(0..features.len())].clone()];
    let mut nearest: Vec<f64> = features
        .iter()
        .map(|f| feature_distance(f, &centroids[0], metric))
        .collect::<Result<_>>()?;
    while centroids.len() < k {
        let weights: Vec<f64> = nearest.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && r < *w {
                    pick = i;
                    break;
                }
                r -= w;
            }
            pick
        } else {
            // every point coincides with a chosen centroid
            centroids.len()
        };
        centroids.push(features[pick].clone());
        let newest = centroids.last().expect("just pushed");
        for (d, f) in nearest.iter_mut().zip(features) {
            *d = d.min(feature_distance(f, newest, metric)?);
        }
    }

    let mut labels = vec![usize::MAX; features.len()];
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let assigned = par::map_range(features.len(), |i| -> Result<usize> {
            let d = centroids
                .iter()
                .map(|c| feature_distance(&features[i], c, metric))
                .collect::<Result<Vec<_>>>()?;
            Ok(argmin(&d))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        if assigned == labels {
            break;
        }
        labels = assigned;
        for (j, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&DomainFeature> = features
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == j)
                .map(|(f, _)| f)
                .collect();
            if !members.is_empty() {
                *c = mean_feature(&members);
            }
        }
    }
    Ok(KMeansResult {
        labels,
        centroids,
        iterations,
    })
}

fn mean_feature(members: &[&DomainFeature]) -> DomainFeature {
    let n = members.len() as f64;
    let layers = (0..members[0].layers.len())
        .map(|l| {
            let c = members[0].layers[l].channels();
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            for m in members {
                for (a, b) in means.iter_mut().zip(&m.layers[l].means) {
                    *a += b;
                }
                for (a, b) in vars.iter_mut().zip(&m.layers[l].vars) {
                    *a += b;
                }
            }
            ChannelStats {
                means: means.into_iter().map(|v| v / n).collect(),
                vars: vars.into_iter().map(|v| v / n).collect(),
            }
        })
        .collect();
    DomainFeature { layers }
}
