//! Batch normalization with frozen source statistics, α-mixed target
//! statistics and K independent affine branches.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{channel_statistics, ChannelStats, Real, Shape, StatsScope, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_ALPHA: f64 = 0.9;

static NEXT_BANK_ID: AtomicU64 = AtomicU64::new(1);

/// One (γ, β) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> Affine<T> {
    pub fn identity(channels: usize) -> Self {
        Affine {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        }
    }
}

/// Source running statistics plus K affine branches for one BN layer.
#[derive(Debug, Clone)]
pub struct BnBranchBank<T> {
    id: u64,
    generation: u64,
    source: ChannelStats,
    branches: Vec<Affine<T>>,
    alpha: f64,
    epsilon: f64,
}

/// Copies a pretrained affine pair into `k` branches.
pub fn init_branches<T: Real>(
    gamma: Vec<T>,
    beta: Vec<T>,
    running: ChannelStats,
    k: usize,
    alpha: f64,
) -> Result<BnBranchBank<T>> {
    if k < 1 {
        return Err(Error::InvalidConfig("branch count K must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} outside [0, 1]")));
    }
    let c = running.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::InvalidShape(format!(
            "affine lengths ({}, {}) vs {c} channels",
            gamma.len(),
            beta.len()
        )));
    }
    let running = ChannelStats::new(running.means, running.vars)?;
    Ok(BnBranchBank {
        id: NEXT_BANK_ID.fetch_add(1, Ordering::Relaxed),
        generation: 0,
        source: running,
        branches: vec![Affine { gamma, beta }; k],
        alpha,
        epsilon: BN_EPSILON,
    })
}

/// What the forward pass remembers for its paired backward.
#[derive(Debug, Clone)]
pub struct BnContext<T> {
    bank: u64,
    generation: u64,
    branch: usize,
    shape: Shape,
    train: bool,
    xhat: Vec<T>,
    inv_std: Vec<f64>,
    mixed: ChannelStats,
}

impl<T> BnContext<T> {
    pub fn branch(&self) -> usize {
        self.branch
    }

    /// The statistics actually used for normalization.
    pub fn mixed_stats(&self) -> &ChannelStats {
        &self.mixed
    }
}

#[derive(Debug, Clone)]
pub struct BnForward<T> {
    pub output: Tensor<T>,
    /// Raw batch statistics of the input.
    pub target: ChannelStats,
    pub context: BnContext<T>,
}

#[derive(Debug, Clone)]
pub struct BnGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Real> BnBranchBank<T> {
    pub fn k(&self) -> usize {
        self.branches.len()
    }

    pub fn channels(&self) -> usize {
        self.source.channels()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn source(&self) -> &ChannelStats {
        &self.source
    }

    pub fn branch(&self, i: usize) -> Result<&Affine<T>> {
        self.branches.get(i).ok_or(Error::InvalidBranch {
            branch: i,
            count: self.branches.len(),
        })
    }

    pub fn branches(&self) -> &[Affine<T>] {
        &self.branches
    }

    pub(crate) fn set_source(&mut self, stats: ChannelStats) {
        self.source = stats;
        self.generation += 1;
    }

    pub(crate) fn branch_mut(&mut self, i: usize) -> Result<&mut Affine<T>> {
        let count = self.branches.len();
        self.generation += 1;
        self.branches
            .get_mut(i)
            .ok_or(Error::InvalidBranch { branch: i, count })
    }

    fn check_input(&self, input: &Tensor<T>, branch: usize) -> Result<()> {
        self.branch(branch)?;
        if input.shape().c != self.channels() {
            return Err(Error::InvalidShape(format!(
                "BN expects {} channels, input {}",
                self.channels(),
                input.shape()
            )));
        }
        Ok(())
    }

    /// α-BN forward: μ = α·μ_s + (1−α)·μ_t and likewise for the variance.
    pub fn forward(&self, input: &Tensor<T>, branch: usize) -> Result<BnForward<T>> {
        self.check_input(input, branch)?;
        let target = channel_statistics(input, StatsScope::PerBatch).remove(0);
        let a = self.alpha;
        let mix = |s: &[f64], t: &[f64]| -> Vec<f64> {
            s.iter().zip(t).map(|(s, t)| a * s + (1.0 - a) * t).collect()
        };
        let mixed = ChannelStats {
            means: mix(&self.source.means, &target.means),
            vars: mix(&self.source.vars, &target.vars),
        };
        Ok(self.normalize(input, branch, target, mixed, false))
    }

    /// Forward with externally supplied normalization statistics.
    pub fn forward_frozen(
        &self,
        input: &Tensor<T>,
        branch: usize,
        mixed: &ChannelStats,
    ) -> Result<BnForward<T>> {
        self.check_input(input, branch)?;
        if mixed.channels() != self.channels() {
            return Err(Error::InvalidShape("frozen statistics channel count".into()));
        }
        let target = channel_statistics(input, StatsScope::PerBatch).remove(0);
        Ok(self.normalize(input, branch, target, mixed.clone(), false))
    }

    /// Training-mode forward: pure batch statistics, and the paired backward
    /// differentiates through them.
    pub fn forward_train(&self, input: &Tensor<T>, branch: usize) -> Result<BnForward<T>> {
        self.check_input(input, branch)?;
        let target = channel_statistics(input, StatsScope::PerBatch).remove(0);
        let mixed = target.clone();
        Ok(self.normalize(input, branch, target, mixed, true))
    }

    fn normalize(
        &self,
        input: &Tensor<T>,
        branch: usize,
        target: ChannelStats,
        mixed: ChannelStats,
        train: bool,
    ) -> BnForward<T> {
        let s = input.shape();
        let plane = s.plane();
        let affine = &self.branches[branch];
        let inv_std: Vec<f64> = mixed
            .vars
            .iter()
            .map(|v| 1.0 / (v + self.epsilon).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); s.len()];
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * plane;
                let (mu, inv) = (mixed.means[c], inv_std[c]);
                let (g, b) = (affine.gamma[c], affine.beta[c]);
                let src = &input.data()[start..start + plane];
                let xh = &mut xhat[start..start + plane];
                let dst = &mut out.data_mut()[start..start + plane];
                for ((x, h), y) in src.iter().zip(xh.iter_mut()).zip(dst.iter_mut()) {
                    *h = T::of((x.f64() - mu) * inv);
                    *y = g * *h + b;
                }
            }
        }
        BnForward {
            output: out,
            target,
            context: BnContext {
                bank: self.id,
                generation: self.generation,
                branch,
                shape: s,
                train,
                xhat,
                inv_std,
                mixed,
            },
        }
    }

    /// Backward of the paired forward. Normalization statistics are constants
    /// unless the context came from [`forward_train`](Self::forward_train).
    pub fn backward(&self, upstream: &Tensor<T>, ctx: &BnContext<T>) -> Result<BnGrads<T>> {
        if ctx.bank != self.id || ctx.generation != self.generation {
            return Err(Error::StaleContext(
                "BN parameters changed since the forward pass".into(),
            ));
        }
        if upstream.shape() != ctx.shape {
            return Err(Error::StaleContext(format!(
                "upstream {} does not match forward shape {}",
                upstream.shape(),
                ctx.shape
            )));
        }
        let s = ctx.shape;
        let plane = s.plane();
        let m = (s.n * plane) as f64;
        let affine = self.branch(ctx.branch)?;
        let mut dgamma = vec![0.0f64; s.c];
        let mut dbeta = vec![0.0f64; s.c];
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * plane;
                let dy = &upstream.data()[start..start + plane];
                let xh = &ctx.xhat[start..start + plane];
                for (g, h) in dy.iter().zip(xh) {
                    dgamma[c] += g.f64() * h.f64();
                    dbeta[c] += g.f64();
                }
            }
        }
        let mut dx = Tensor::zeros(s);
        for n in 0..s.n {
            for c in 0..s.c {
                let start = (n * s.c + c) * plane;
                let scale = affine.gamma[c].f64() * ctx.inv_std[c];
                let dy = &upstream.data()[start..start + plane];
                let xh = &ctx.xhat[start..start + plane];
                let dst = &mut dx.data_mut()[start..start + plane];
                if ctx.train {
                    let (sum_dy, sum_dy_xh) = (dbeta[c], dgamma[c]);
                    for ((d, g), h) in dst.iter_mut().zip(dy).zip(xh) {
                        *d = T::of(scale * (g.f64() - sum_dy / m - h.f64() * sum_dy_xh / m));
                    }
                } else {
                    for (d, g) in dst.iter_mut().zip(dy) {
                        *d = T::of(g.f64() * scale);
                    }
                }
            }
        }
        Ok(BnGrads {
            input: dx,
            gamma: dgamma.into_iter().map(T::of).collect(),
            beta: dbeta.into_iter().map(T::of).collect(),
        })
    }

    /// Plain SGD on one branch's affine pair.
    pub fn apply_sgd(&mut self, branch: usize, gamma_grad: &[T], beta_grad: &[T], lr: T) -> Result<()> {
        let c = self.channels();
        if gamma_grad.len() != c || beta_grad.len() != c {
            return Err(Error::InvalidShape("affine gradient length".into()));
        }
        let affine = self.branch_mut(branch)?;
        for (p, g) in affine.gamma.iter_mut().zip(gamma_grad) {
            *p = *p - lr * *g;
        }
        for (p, g) in affine.beta.iter_mut().zip(beta_grad) {
            *p = *p - lr * *g;
        }
        Ok(())
    }
}
