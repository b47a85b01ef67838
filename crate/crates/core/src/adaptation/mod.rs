//! The online adaptation loop: per-sample branch selection, α-BN forward,
//! similarity-weighted unsupervised loss, affine-only SGD.

mod analysis;
mod evaluate;
mod pretrain;
mod report;

pub use analysis::{correlation_table, ddr_grid, sample_signals, sample_taps, CorrelationRow, DdrRow, SampleSignals};
pub use evaluate::{branch_matrix, evaluate, infer, miou_by_domain, EvalSummary};
pub use pretrain::{pretrain, source_miou, PretrainConfig, Pretrained};
pub use report::{adapt_and_evaluate, parameter_deltas, AdaptReport, ClusteringSummary, STEPS_CSV_HEADER};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bn::DEFAULT_ALPHA;
use crate::clustering::{ClusterBank, DomainFeature, Metric, DEFAULT_ETA};
use crate::error::{Error, Result};
use crate::losses::{
    denoise_weight, entropy_loss, scale_gradient, weight_scale, weighted_objective, DenoiseConfig, LossKind,
    DEFAULT_DELTA,
};
use crate::network::{argmax_labels, SegNet, Tap};
use crate::tensor::{ChannelStats, Tensor};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-2;
pub const DEFAULT_BATCH_SIZE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchMode {
    /// Branch from online clustering.
    Pseudo,
    /// Branch from the true domain id (evaluation harness only).
    Oracle,
    /// Always branch 0.
    Compound,
}

impl BranchMode {
    pub const ALL: [BranchMode; 3] = [BranchMode::Pseudo, BranchMode::Oracle, BranchMode::Compound];

    pub const fn name(self) -> &'static str {
        match self {
            BranchMode::Pseudo => "pseudo",
            BranchMode::Oracle => "oracle",
            BranchMode::Compound => "compound",
        }
    }
}

impl fmt::Display for BranchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BranchMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown branch mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub eta: f64,
    pub delta: f64,
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub clustering_layers: Vec<Tap>,
    pub denoise_layers: Vec<Tap>,
    pub metric: Metric,
    pub seed: u64,
    pub branch_mode: BranchMode,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: DEFAULT_ALPHA,
            eta: DEFAULT_ETA,
            delta: DEFAULT_DELTA,
            k: DEFAULT_K,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: DEFAULT_BATCH_SIZE,
            loss: LossKind::PseudoLabel,
            clustering_layers: vec![Tap::T0, Tap::T1],
            denoise_layers: Tap::ALL.to_vec(),
            metric: Metric::Bhattacharyya,
            seed: 0,
            branch_mode: BranchMode::Pseudo,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta {} outside [0, 1]", self.eta));
        }
        if self.k < 1 {
            return bad("k must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1".into());
        }
        if self.clustering_layers.is_empty() {
            return bad("clustering layer set is empty".into());
        }
        self.denoise().validate()
    }

    pub fn denoise(&self) -> DenoiseConfig {
        DenoiseConfig {
            delta: self.delta,
            layers: self.denoise_layers.clone(),
        }
    }
}

/// Everything one step recorded about its batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub sample_ids: Vec<usize>,
    /// Filled by the harness after the step; never read by adaptation.
    pub true_domains: Vec<Option<usize>>,
    pub pseudo_labels: Vec<usize>,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub weight_scales: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Output of one step: the record and the per-sample predictions made with
/// the pre-update parameters.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub record: StepRecord,
    pub predictions: Vec<Vec<u8>>,
}

/// Online adaptation state.
#[derive(Debug, Clone)]
pub struct Adapter {
    net: SegNet<f32>,
    bank: ClusterBank,
    config: AdaptConfig,
    source: BTreeMap<Tap, ChannelStats>,
    last_branch: usize,
    step: usize,
}

/// Sample indices keyed by branch; order within a group follows the batch.
pub(crate) fn group_by_branch(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups = BTreeMap::<usize, Vec<usize>>::new();
    for (i, &b) in labels.iter().enumerate() {
        groups.entry(b).or_default().push(i);
    }
    groups
}

impl Adapter {
    /// Expands the pretrained network to `config.k` branches with `config.alpha`.
    pub fn new(pretrained: &SegNet<f32>, config: AdaptConfig) -> Result<Self> {
        config.validate()?;
        let net = pretrained.with_branches(config.k, config.alpha)?;
        let bank = ClusterBank::new(config.k, config.eta, config.metric)?;
        Ok(Adapter {
            source: net.source_stats(),
            net,
            bank,
            config,
            last_branch: 0,
            step: 0,
        })
    }

    pub fn net(&self) -> &SegNet<f32> {
        &self.net
    }

    pub fn bank(&self) -> &ClusterBank {
        &self.bank
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.config
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn last_branch(&self) -> usize {
        self.last_branch
    }

    /// Clustering features of every sample, taken with the last-used branch.
    pub fn features(&self, batch: &Tensor<f32>) -> Result<Vec<DomainFeature>> {
        let layers = &self.config.clustering_layers;
        let taps = self.net.tap_statistics(batch, self.last_branch, layers)?;
        (0..batch.shape().n)
            .map(|n| DomainFeature::from_taps(&taps, layers, n))
            .collect()
    }

    fn choose_branches(&mut self, batch: &Tensor<f32>, oracle: Option<&[usize]>) -> Result<Vec<usize>> {
        let n = batch.shape().n;
        match self.config.branch_mode {
            BranchMode::Compound => Ok(vec![0; n]),
            BranchMode::Oracle => {
                let domains = oracle
                    .ok_or_else(|| Error::InvalidConfig("oracle mode needs true domain ids".into()))?;
                if domains.len() != n {
                    return Err(Error::InvalidShape(format!("{} domain ids for {n} samples", domains.len())));
                }
                if let Some(&d) = domains.iter().find(|&&d| d >= self.config.k) {
                    return Err(Error::InvalidConfig(format!(
                        "oracle domain {d} needs k > {d}, have k = {}",
                        self.config.k
                    )));
                }
                Ok(domains.to_vec())
            }
            BranchMode::Pseudo => self
                .features(batch)?
                .iter()
                .map(|f| self.bank.assign_and_update(f))
                .collect(),
        }
    }

    /// One adaptation step. `oracle` is consulted only in oracle mode.
    pub fn step(&mut self, batch: &Tensor<f32>, sample_ids: &[usize], oracle: Option<&[usize]>) -> Result<StepOutput> {
        let n = batch.shape().n;
        if sample_ids.len() != n {
            return Err(Error::InvalidShape(format!("{} ids for {n} samples", sample_ids.len())));
        }
        let branches = self.choose_branches(batch, oracle)?;
        let mut record = StepRecord {
            step: self.step,
            sample_ids: sample_ids.to_vec(),
            true_domains: vec![None; n],
            pseudo_labels: branches.clone(),
            losses: vec![0.0; n],
            weights: vec![0.0; n],
            weight_scales: vec![0.0; n],
            entropies: vec![0.0; n],
        };
        let mut predictions = vec![Vec::new(); n];
        let denoise = self.config.denoise();
        let lr = self.config.learning_rate as f32;
        for (branch, members) in group_by_branch(&branches) {
            let sub = batch.select_samples(&members)?;
            let pass = self.net.forward_with_taps(&sub, branch)?;
            let loss = self.config.loss.evaluate(&pass.probs);
            let weights = denoise_weight(&pass.taps, &self.source, &denoise)?;
            let (objective, scales) = weighted_objective(&loss.per_sample, &weights, self.config.delta)?;
            if !objective.is_finite() {
                return Err(Error::Numeric(format!("non-finite objective at step {}", self.step)));
            }
            let entropy = match self.config.loss {
                LossKind::Entropy => loss.per_sample.clone(),
                _ => entropy_loss(&pass.probs).per_sample,
            };
            for (j, labels) in argmax_labels(&pass.probs).into_iter().enumerate() {
                let i = members[j];
                predictions[i] = labels;
                record.losses[i] = loss.per_sample[j];
                record.weights[i] = weights[j];
                record.weight_scales[i] = weight_scale(weights[j], self.config.delta);
                record.entropies[i] = entropy[j];
            }
            if lr != 0.0 {
                let grad = scale_gradient(&loss.grad_logits, &scales)?;
                let grads = self.net.backward_affine_only(&pass, &grad)?;
                if grads.layers.iter().any(|l| l.gamma.iter().chain(&l.beta).any(|v| !v.is_finite())) {
                    return Err(Error::Numeric(format!("non-finite gradient at step {}", self.step)));
                }
                self.net.apply_affine_sgd(&grads, lr)?;
            }
        }
        if let Some(&b) = branches.last() {
            self.last_branch = b;
        }
        self.step += 1;
        Ok(StepOutput { record, predictions })
    }
}

/// Result of a pass over a stream.
#[derive(Debug, Clone)]
pub struct StreamRun {
    pub adapter: Adapter,
    pub records: Vec<StepRecord>,
    pub predictions: Vec<Vec<u8>>,
}

/// Runs [`Adapter::step`] over consecutive batches of `images`.
/// `oracle` (per-sample domain ids) is required in oracle mode and ignored otherwise.
pub fn run_stream(
    pretrained: &SegNet<f32>,
    images: &[Tensor<f32>],
    oracle: Option<&[usize]>,
    config: &AdaptConfig,
) -> Result<StreamRun> {
    let mut adapter = Adapter::new(pretrained, config.clone())?;
    let oracle = match config.branch_mode {
        BranchMode::Oracle => {
            let o = oracle.ok_or_else(|| Error::InvalidConfig("oracle mode needs true domain ids".into()))?;
            if o.len() != images.len() {
                return Err(Error::InvalidShape(format!("{} domain ids for {} images", o.len(), images.len())));
            }
            Some(o)
        }
        _ => None,
    };
    let mut records = Vec::new();
    let mut predictions = Vec::with_capacity(images.len());
    let mut start = 0;
    while start < images.len() {
        let end = (start + config.batch_size).min(images.len());
        let parts: Vec<&Tensor<f32>> = images[start..end].iter().collect();
        let batch = Tensor::stack(&parts)?;
        let ids: Vec<usize> = (start..end).collect();
        let out = adapter.step(&batch, &ids, oracle.map(|o| &o[start..end]))?;
        records.push(out.record);
        predictions.extend(out.predictions);
        start = end;
    }
    Ok(StreamRun {
        adapter,
        records,
        predictions,
    })
}
