use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_labels, NormMode, SegNet};
use crate::par;
use crate::synth::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Running-statistics momentum: `s ← (1−m)·s + m·batch`.
    pub momentum: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 12,
            learning_rate: 0.05,
            batch_size: 8,
            seed: 0,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub net: SegNet<f32>,
    /// Mean training cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Batch-mean pixel cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy(probs: &Tensor<f32>, labels: &[&[u8]]) -> (f64, Tensor<f32>) {
    let s = probs.shape();
    let plane = s.plane();
    let scale = 1.0 / (s.n * plane) as f64;
    let per: Vec<(f64, Vec<f32>)> = par::map_range(s.n, |n| {
        let p = probs.sample(n);
        let mut g: Vec<f32> = p.iter().map(|v| (*v as f64 * scale) as f32).collect();
        let mut total = 0.0;
        for (i, &l) in labels[n].iter().enumerate() {
            let idx = l as usize * plane + i;
            total -= (p[idx] as f64).max(1e-30).ln();
            g[idx] = ((p[idx] as f64 - 1.0) * scale) as f32;
        }
        (total, g)
    });
    let mut loss = 0.0;
    let mut data = Vec::with_capacity(s.len());
    for (l, g) in per {
        loss += l;
        data.extend(g);
    }
    (loss * scale, Tensor::from_vec(s, data).expect("shape preserved"))
}

/// Supervised training of every parameter with plain SGD and batch-statistics BN.
pub fn pretrain(train: &Stream, classes: usize, cfg: &PretrainConfig) -> Result<Pretrained> {
    if train.is_empty() {
        return Err(Error::InvalidConfig("pretraining set is empty".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&cfg.momentum) || !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::InvalidConfig("momentum must lie in [0, 1] and learning_rate be > 0".into()));
    }
    let mut net = SegNet::<f32>::new(classes, 1, crate::bn::DEFAULT_ALPHA, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let lr = cfg.learning_rate as f32;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let parts: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &train.images.images[i]).collect();
            let batch = Tensor::stack(&parts)?;
            let labels: Vec<&[u8]> = chunk.iter().map(|&i| train.eval.labels[i].as_slice()).collect();
            let pass = net.forward_mode(&batch, 0, NormMode::Train)?;
            let (loss, grad) = cross_entropy(&pass.probs, &labels);
            if !loss.is_finite() {
                return Err(Error::Numeric("non-finite pretraining loss".into()));
            }
            let grads = net.backward_full(&pass, &grad)?;
            net.apply_full_sgd(&grads, lr)?;
            net.update_running_stats(&pass.batch_stats, cfg.momentum);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(Pretrained { net, epoch_losses })
}

/// mIoU of source-only inference (α = 1, branch 0) over a labeled split.
pub fn source_miou(net: &SegNet<f32>, data: &Stream, batch_size: usize) -> Result<f64> {
    let frozen = net.with_branches(1, 1.0)?;
    let mut cm = ConfusionMatrix::new(net.classes());
    for (start, chunk) in data.images.images.chunks(batch_size.max(1)).enumerate() {
        let parts: Vec<&Tensor<f32>> = chunk.iter().collect();
        let batch = Tensor::stack(&parts)?;
        let preds = argmax_labels(&frozen.forward_with_taps(&batch, 0)?.probs);
        for (j, p) in preds.iter().enumerate() {
            cm.update(p, &data.eval.labels[start * batch_size.max(1) + j])?;
        }
    }
    Ok(cm.miou()?.0)
}
