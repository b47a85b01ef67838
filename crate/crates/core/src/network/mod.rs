//! The fixed toy segmentation network with named statistics taps.
//!
//! ```text
//! conv3x3(3→16, s1) + BN[t0] + ReLU
//! conv3x3(16→32, s2) + BN[t1] + ReLU
//! conv3x3(32→32, s1) + BN[t2] + ReLU
//! conv3x3(32→64, s2) + BN[t3] + ReLU
//! conv1x1(64→C) → bilinear ×4 → softmax
//! ```
//!
//! A tap holds per-sample statistics of the BN input (the conv output).

mod checkpoint;

pub use checkpoint::{architecture_descriptor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bn::{init_branches, Affine, BnBranchBank, BnContext};
use crate::error::{Error, Result};
use crate::tensor::{
    channel_statistics, conv2d, conv2d_backward, relu, relu_backward, softmax_channels,
    upsample_bilinear, upsample_bilinear_backward, ChannelStats, Real, Shape, StatsScope, Tensor,
};

pub const DEFAULT_CLASSES: usize = 5;
pub const UPSAMPLE: usize = 4;
pub const INPUT_CHANNELS: usize = 3;
/// (in channels, out channels, stride) of the four conv-BN blocks.
pub const BLOCKS: [(usize, usize, usize); 4] = [(3, 16, 1), (16, 32, 2), (32, 32, 1), (32, 64, 2)];

/// Named BN input taps, shallow to deep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tap {
    #[serde(rename = "t0")]
    T0,
    #[serde(rename = "t1")]
    T1,
    #[serde(rename = "t2")]
    T2,
    #[serde(rename = "t3")]
    T3,
}

impl Tap {
    pub const ALL: [Tap; 4] = [Tap::T0, Tap::T1, Tap::T2, Tap::T3];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub const fn name(self) -> &'static str {
        match self {
            Tap::T0 => "t0",
            Tap::T1 => "t1",
            Tap::T2 => "t2",
            Tap::T3 => "t3",
        }
    }

    pub fn channels(self) -> usize {
        BLOCKS[self.index()].1
    }
}

impl fmt::Display for Tap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tap::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown tap '{s}' (expected t0..t3)")))
    }
}

/// Per-tap, per-sample statistics.
pub type TapStats = BTreeMap<Tap, Vec<ChannelStats>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Real> Conv2d<T> {
    fn he_init(rng: &mut ChaCha8Rng, in_c: usize, out_c: usize, k: usize, stride: usize) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let shape = Shape::new(out_c, in_c, k, k);
        Conv2d {
            weight: Tensor::from_fn(shape, |_| T::of(normal.sample(rng))),
            bias: vec![T::zero(); out_c],
            stride,
            padding: k / 2,
        }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(input, &self.weight, &self.bias, self.stride, self.padding)
    }

    fn cast<U: Real>(&self) -> Conv2d<U> {
        Conv2d {
            weight: self.weight.cast(),
            bias: self.bias.iter().map(|v| U::of(v.f64())).collect(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// How BN layers obtain their normalization statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// α-mix of source running statistics and the batch's statistics.
    Adapt,
    /// Use the given per-layer statistics verbatim.
    Frozen(&'a [ChannelStats]),
    /// Pure batch statistics with gradients through them (pretraining).
    Train,
}

/// Activations kept for the paired backward pass.
#[derive(Debug, Clone)]
struct ForwardCache<T> {
    branch: usize,
    /// Input of each conv block (the image for block 0).
    conv_in: Vec<Tensor<T>>,
    /// BN inputs (conv outputs) of each block.
    pre_bn: Vec<Tensor<T>>,
    bn_ctx: Vec<BnContext<T>>,
    head_in: Tensor<T>,
    head_out_shape: Shape,
}

/// Output of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
    pub taps: TapStats,
    /// Batch statistics of each BN input.
    pub batch_stats: Vec<ChannelStats>,
    cache: ForwardCache<T>,
}

impl<T> ForwardPass<T> {
    pub fn branch(&self) -> usize {
        self.cache.branch
    }

    /// Statistics each BN layer normalized with; feed to [`NormMode::Frozen`].
    pub fn normalization_stats(&self) -> Vec<ChannelStats> {
        self.cache.bn_ctx.iter().map(|c| c.mixed_stats().clone()).collect()
    }

    /// The pre-BN activation of one tap.
    pub fn tap_activation(&self, tap: Tap) -> &Tensor<T> {
        &self.cache.pre_bn[tap.index()]
    }
}

/// γ and β gradients for one branch, one entry per BN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads<T> {
    pub branch: usize,
    pub layers: Vec<Affine<T>>,
}

/// Gradients for every parameter (pretraining).
#[derive(Debug, Clone)]
pub struct FullGrads<T> {
    pub convs: Vec<(Tensor<T>, Vec<T>)>,
    pub head: (Tensor<T>, Vec<T>),
    pub affine: AffineGrads<T>,
}

/// The segmentation network.
#[derive(Debug, Clone)]
pub struct SegNet<T> {
    convs: Vec<Conv2d<T>>,
    bns: Vec<BnBranchBank<T>>,
    head: Conv2d<T>,
    classes: usize,
}

impl<T: Real> SegNet<T> {
    /// He-initialized weights, identity affine, standard running statistics.
    pub fn new(classes: usize, k: usize, alpha: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let convs = BLOCKS
            .iter()
            .map(|&(i, o, s)| Conv2d::he_init(&mut rng, i, o, 3, s))
            .collect();
        let bns = BLOCKS
            .iter()
            .map(|&(_, o, _)| {
                let a = Affine::<T>::identity(o);
                init_branches(a.gamma, a.beta, ChannelStats::standard(o), k, alpha)
            })
            .collect::<Result<_>>()?;
        let head = Conv2d::he_init(&mut rng, BLOCKS[3].1, classes, 1, 1);
        Ok(SegNet {
            convs,
            bns,
            head,
            classes,
        })
    }

    pub(crate) fn from_parts(
        convs: Vec<Conv2d<T>>,
        bns: Vec<BnBranchBank<T>>,
        head: Conv2d<T>,
        classes: usize,
    ) -> Self {
        SegNet {
            convs,
            bns,
            head,
            classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn k(&self) -> usize {
        self.bns[0].k()
    }

    pub fn alpha(&self) -> f64 {
        self.bns[0].alpha()
    }

    pub fn convs(&self) -> &[Conv2d<T>] {
        &self.convs
    }

    pub fn head(&self) -> &Conv2d<T> {
        &self.head
    }

    pub fn bn(&self, tap: Tap) -> &BnBranchBank<T> {
        &self.bns[tap.index()]
    }

    pub fn bns(&self) -> &[BnBranchBank<T>] {
        &self.bns
    }

    /// Source running statistics of every BN layer, keyed by tap.
    pub fn source_stats(&self) -> BTreeMap<Tap, ChannelStats> {
        Tap::ALL
            .into_iter()
            .map(|t| (t, self.bns[t.index()].source().clone()))
            .collect()
    }

    /// Rebuilds every BN layer as `k` copies of branch 0 with mixing weight
    /// `alpha`. Source statistics are carried over unchanged.
    pub fn with_branches(&self, k: usize, alpha: f64) -> Result<Self> {
        let bns = self
            .bns
            .iter()
            .map(|b| {
                let a = b.branch(0)?.clone();
                init_branches(a.gamma, a.beta, b.source().clone(), k, alpha)
            })
            .collect::<Result<_>>()?;
        Ok(SegNet {
            convs: self.convs.clone(),
            bns,
            head: self.head.clone(),
            classes: self.classes,
        })
    }

    /// Same parameters in another precision.
    pub fn cast<U: Real>(&self) -> SegNet<U> {
        let bns = self
            .bns
            .iter()
            .map(|b| {
                let mut out = init_branches(
                    b.branch(0).expect("k >= 1").gamma.iter().map(|v| U::of(v.f64())).collect(),
                    b.branch(0).expect("k >= 1").beta.iter().map(|v| U::of(v.f64())).collect(),
                    b.source().clone(),
                    b.k(),
                    b.alpha(),
                )
                .expect("valid bank");
                for (i, a) in b.branches().iter().enumerate() {
                    let dst = out.branch_mut(i).expect("same k");
                    dst.gamma = a.gamma.iter().map(|v| U::of(v.f64())).collect();
                    dst.beta = a.beta.iter().map(|v| U::of(v.f64())).collect();
                }
                out
            })
            .collect();
        SegNet {
            convs: self.convs.iter().map(Conv2d::cast).collect(),
            bns,
            head: self.head.cast(),
            classes: self.classes,
        }
    }

    fn check_batch(&self, batch: &Tensor<T>, branch: usize) -> Result<()> {
        let s = batch.shape();
        if s.c != INPUT_CHANNELS {
            return Err(Error::InvalidShape(format!("expected RGB batch, got {s}")));
        }
        if s.n == 0 || s.h == 0 || s.w == 0 || !s.h.is_multiple_of(UPSAMPLE) || !s.w.is_multiple_of(UPSAMPLE) {
            return Err(Error::InvalidShape(format!(
                "spatial dims of {s} must be positive multiples of {UPSAMPLE}"
            )));
        }
        self.bns[0].branch(branch)?;
        Ok(())
    }

    /// Full forward pass with α-BN on `branch`.
    pub fn forward_with_taps(&self, batch: &Tensor<T>, branch: usize) -> Result<ForwardPass<T>> {
        self.forward_mode(batch, branch, NormMode::Adapt)
    }

    pub fn forward_mode(
        &self,
        batch: &Tensor<T>,
        branch: usize,
        mode: NormMode<'_>,
    ) -> Result<ForwardPass<T>> {
        self.check_batch(batch, branch)?;
        if let NormMode::Frozen(stats) = mode {
            if stats.len() != self.bns.len() {
                return Err(Error::InvalidShape("frozen statistics per BN layer".into()));
            }
        }
        let mut conv_in = Vec::with_capacity(4);
        let mut pre_bn = Vec::with_capacity(4);
        let mut bn_ctx = Vec::with_capacity(4);
        let mut taps = TapStats::new();
        let mut batch_stats = Vec::with_capacity(4);
        let mut x = batch.clone();
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            let pre = conv.forward(&x)?;
            taps.insert(Tap::ALL[i], channel_statistics(&pre, StatsScope::PerSample));
            let f = match mode {
                NormMode::Adapt => bn.forward(&pre, branch)?,
                NormMode::Frozen(stats) => bn.forward_frozen(&pre, branch, &stats[i])?,
                NormMode::Train => bn.forward_train(&pre, branch)?,
            };
            batch_stats.push(f.target);
            conv_in.push(std::mem::replace(&mut x, relu(&f.output)));
            pre_bn.push(pre);
            bn_ctx.push(f.context);
        }
        let head_out = self.head.forward(&x)?;
        let logits = upsample_bilinear(&head_out, UPSAMPLE)?;
        let probs = softmax_channels(&logits);
        Ok(ForwardPass {
            logits,
            probs,
            taps,
            batch_stats,
            cache: ForwardCache {
                branch,
                conv_in,
                pre_bn,
                bn_ctx,
                head_in: x,
                head_out_shape: head_out.shape(),
            },
        })
    }

    /// Per-sample statistics of the requested taps only; stops after the
    /// deepest one.
    pub fn tap_statistics(&self, batch: &Tensor<T>, branch: usize, taps: &[Tap]) -> Result<TapStats> {
        self.check_batch(batch, branch)?;
        let deepest = match taps.iter().max() {
            Some(t) => t.index(),
            None => return Ok(TapStats::new()),
        };
        let mut out = TapStats::new();
        let mut x = batch.clone();
        for i in 0..=deepest {
            let pre = self.convs[i].forward(&x)?;
            if taps.contains(&Tap::ALL[i]) {
                out.insert(Tap::ALL[i], channel_statistics(&pre, StatsScope::PerSample));
            }
            if i < deepest {
                x = relu(&self.bns[i].forward(&pre, branch)?.output);
            }
        }
        Ok(out)
    }

    /// Per-pixel argmax labels of the α-BN forward on `branch`.
    pub fn predict(&self, batch: &Tensor<T>, branch: usize) -> Result<Vec<Vec<u8>>> {
        Ok(argmax_labels(&self.forward_with_taps(batch, branch)?.probs))
    }

    /// Backpropagates a gradient w.r.t. the logits down to the BN affine
    /// parameters of the branch used in `pass`. Conv parameters are untouched.
    pub fn backward_affine_only(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
    ) -> Result<AffineGrads<T>> {
        Ok(self.backward_impl(pass, grad_logits, false)?.affine)
    }

    /// Gradients of every parameter.
    pub fn backward_full(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<FullGrads<T>> {
        self.backward_impl(pass, grad_logits, true)
    }

    fn backward_impl(
        &self,
        pass: &ForwardPass<T>,
        grad_logits: &Tensor<T>,
        full: bool,
    ) -> Result<FullGrads<T>> {
        let cache = &pass.cache;
        if cache.bn_ctx.len() != self.bns.len() {
            return Err(Error::StaleContext("forward pass has no BN contexts".into()));
        }
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::InvalidShape(format!(
                "logit gradient {} vs logits {}",
                grad_logits.shape(),
                pass.logits.shape()
            )));
        }
        let g_head = upsample_bilinear_backward(grad_logits, UPSAMPLE, cache.head_out_shape)?;
        let head = conv2d_backward(
            &cache.head_in,
            &self.head.weight,
            self.head.stride,
            self.head.padding,
            &g_head,
            true,
            full,
        )?;
        let mut g = head.input.expect("requested");
        let mut layers = vec![None; self.bns.len()];
        let mut convs = vec![None; self.convs.len()];
        for i in (0..self.bns.len()).rev() {
            // ReLU output is positive exactly where its input is.
            let relu_out = cache.conv_in.get(i + 1).unwrap_or(&cache.head_in);
            let g_bn = relu_backward(relu_out, &g)?;
            let bn = self.bns[i].backward(&g_bn, &cache.bn_ctx[i])?;
            layers[i] = Some(Affine {
                gamma: bn.gamma,
                beta: bn.beta,
            });
            let need_input = i > 0;
            if need_input || full {
                let conv = &self.convs[i];
                let cg = conv2d_backward(
                    &cache.conv_in[i],
                    &conv.weight,
                    conv.stride,
                    conv.padding,
                    &bn.input,
                    need_input,
                    full,
                )?;
                if full {
                    convs[i] = Some((cg.weight.expect("requested"), cg.bias.expect("requested")));
                }
                if let Some(gi) = cg.input {
                    g = gi;
                }
            }
        }
        let affine = AffineGrads {
            branch: cache.branch,
            layers: layers.into_iter().map(|l| l.expect("filled")).collect(),
        };
        let (convs, head_params) = if full {
            (
                convs.into_iter().map(|c| c.expect("filled")).collect(),
                (head.weight.expect("requested"), head.bias.expect("requested")),
            )
        } else {
            (Vec::new(), (Tensor::zeros(Shape::new(0, 0, 0, 0)), Vec::new()))
        };
        Ok(FullGrads {
            convs,
            head: head_params,
            affine,
        })
    }

    /// Replaces the affine parameters of one branch at `tap`.
    pub fn set_affine(&mut self, tap: Tap, branch: usize, affine: Affine<T>) -> Result<()> {
        let bn = &mut self.bns[tap.index()];
        let channels = bn.channels();
        if affine.gamma.len() != channels || affine.beta.len() != channels {
            return Err(Error::InvalidShape(format!("affine for {channels} channels")));
        }
        *bn.branch_mut(branch)? = affine;
        Ok(())
    }

    /// SGD step on the affine parameters of `grads.branch`.
    pub fn apply_affine_sgd(&mut self, grads: &AffineGrads<T>, lr: T) -> Result<()> {
        for (bn, g) in self.bns.iter_mut().zip(&grads.layers) {
            bn.apply_sgd(grads.branch, &g.gamma, &g.beta, lr)?;
        }
        Ok(())
    }

    /// SGD step on every parameter.
    pub(crate) fn apply_full_sgd(&mut self, grads: &FullGrads<T>, lr: T) -> Result<()> {
        let step = |p: &mut [T], g: &[T]| p.iter_mut().zip(g).for_each(|(p, g)| *p = *p - lr * *g);
        for (conv, (gw, gb)) in self.convs.iter_mut().zip(&grads.convs) {
            step(conv.weight.data_mut(), gw.data());
            step(&mut conv.bias, gb);
        }
        step(self.head.weight.data_mut(), grads.head.0.data());
        step(&mut self.head.bias, &grads.head.1);
        self.apply_affine_sgd(&grads.affine, lr)
    }

    /// Exponential running-statistics update: `s ← (1−m)·s + m·batch`.
    pub(crate) fn update_running_stats(&mut self, batch: &[ChannelStats], momentum: f64) {
        for (bn, b) in self.bns.iter_mut().zip(batch) {
            let old = bn.source();
            let blend = |o: &[f64], n: &[f64]| -> Vec<f64> {
                o.iter().zip(n).map(|(o, n)| (1.0 - momentum) * o + momentum * n).collect()
            };
            let stats = ChannelStats {
                means: blend(&old.means, &b.means),
                vars: blend(&old.vars, &b.vars),
            };
            bn.set_source(stats);
        }
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class index.
pub fn argmax_labels<T: Real>(probs: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = probs.shape();
    let plane = s.plane();
    (0..s.n)
        .map(|n| {
            let sample = probs.sample(n);
            (0..plane)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if sample[c * plane + px] > sample[best * plane + px] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
