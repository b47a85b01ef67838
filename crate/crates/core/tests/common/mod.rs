#![allow(dead_code)]

use cdtta_core::bn::{Affine, BN_EPSILON};
use cdtta_core::losses::{pseudo_label_selection, scale_gradient, LossKind};
use cdtta_core::network::{ForwardPass, NormMode, SegNet, Tap};
use cdtta_core::tensor::{ChannelStats, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Relative errors are taken against `max(|analytic|, |fd|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

/// Per-sample loss written directly from the definitions, in f64.
/// `kept` fixes the pseudo-label pixels so the objective is smooth.
fn reference_loss(kind: LossKind, probs: &Tensor<f64>, kept: &[Vec<(usize, usize)>]) -> f64 {
    let s = probs.shape();
    let plane = s.plane();
    let mut total = 0.0;
    for n in 0..s.n {
        let p = probs.sample(n);
        let at = |c: usize, i: usize| p[c * plane + i];
        total += match kind {
            LossKind::Entropy => {
                (0..plane)
                    .map(|i| -(0..s.c).map(|c| at(c, i) * at(c, i).ln()).sum::<f64>())
                    .sum::<f64>()
                    / plane as f64
            }
            LossKind::MaxSquares => {
                (0..plane)
                    .map(|i| -0.5 * (0..s.c).map(|c| at(c, i).powi(2)).sum::<f64>())
                    .sum::<f64>()
                    / plane as f64
            }
            LossKind::PseudoLabel => {
                let k = &kept[n];
                -k.iter().map(|&(i, c)| at(c, i).ln()).sum::<f64>() / k.len() as f64
            }
        };
    }
    total / s.n as f64
}

pub struct FdSetup {
    pub net: SegNet<f64>,
    pub batch: Tensor<f64>,
    pub branch: usize,
}

/// A randomly initialised two-branch f64 network with perturbed affine
/// parameters and a random 2-sample batch.
pub fn fd_setup(seed: u64, classes: usize, side: usize) -> FdSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SegNet::<f64>::new(classes, 2, 0.9, seed).unwrap();
    let branch = (seed % 2) as usize;
    for tap in Tap::ALL {
        let c = tap.channels();
        let affine = Affine {
            gamma: (0..c).map(|_| rng.random_range(0.7..1.3)).collect(),
            beta: (0..c).map(|_| rng.random_range(-0.2..0.2)).collect(),
        };
        net.set_affine(tap, branch, affine).unwrap();
    }
    let batch = Tensor::from_fn(Shape::new(2, 3, side, side), |_| rng.random_range(0.0..1.0));
    FdSetup { net, batch, branch }
}

/// ReLU input signs of every block, recomputed from the pre-BN taps with
/// the same arithmetic as frozen-mode BN.
fn activation_pattern(net: &SegNet<f64>, pass: &ForwardPass<f64>, frozen: &[ChannelStats], branch: usize) -> Vec<bool> {
    let mut out = Vec::new();
    for tap in Tap::ALL {
        let x = pass.tap_activation(tap);
        let s = x.shape();
        let plane = s.plane();
        let a = net.bn(tap).branch(branch).unwrap();
        let st = &frozen[tap.index()];
        for n in 0..s.n {
            for c in 0..s.c {
                let inv = 1.0 / (st.vars[c] + BN_EPSILON).sqrt();
                let start = (n * s.c + c) * plane;
                out.extend(
                    x.data()[start..start + plane]
                        .iter()
                        .map(|v| a.gamma[c] * ((v - st.means[c]) * inv) + a.beta[c] > 0.0),
                );
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    /// Largest relative error per loss, in [`LossKind::ALL`] order.
    pub worst: [f64; 3],
    pub checked: usize,
    /// Parameters whose central stencil straddled a ReLU kink and were
    /// checked with a one-sided second-order stencil or a smaller step.
    pub kink_adjusted: usize,
    /// Parameters with kinks on both sides at every step tried.
    pub unresolved: usize,
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.unresolved == 0 && self.worst.iter().all(|e| *e < tol)
    }
}

/// Checks every affine parameter of the active branch against finite
/// differences of the reference losses under frozen statistics. ReLU kinks
/// inside a stencil are detected from the activation signs.
pub fn fd_check(setup: &FdSetup) -> FdReport {
    let FdSetup { net, batch, branch } = setup;
    let branch = *branch;
    let pass = net.forward_with_taps(batch, branch).unwrap();
    let frozen = pass.normalization_stats();
    let s = pass.probs.shape();
    let kept: Vec<Vec<(usize, usize)>> = (0..s.n)
        .map(|n| pseudo_label_selection(pass.probs.sample(n), s.c))
        .collect();
    let analytic: Vec<_> = LossKind::ALL
        .iter()
        .map(|k| {
            let g = k.evaluate(&pass.probs).grad_logits;
            let g = scale_gradient(&g, &vec![1.0; s.n]).unwrap();
            net.backward_affine_only(&pass, &g).unwrap()
        })
        .collect();
    let evaluate = |n: &SegNet<f64>| -> ([f64; 3], Vec<bool>) {
        let p = n.forward_mode(batch, branch, NormMode::Frozen(&frozen)).unwrap();
        (
            LossKind::ALL.map(|k| reference_loss(k, &p.probs, &kept)),
            activation_pattern(n, &p, &frozen, branch),
        )
    };
    let (f0, p0) = evaluate(net);
    let mut report = FdReport::default();
    let mut work = net.clone();
    for tap in Tap::ALL {
        let base = net.bn(tap).branch(branch).unwrap().clone();
        for c in 0..tap.channels() {
            for which in 0..2 {
                let mut at = |d: f64| {
                    let mut a = base.clone();
                    if which == 0 {
                        a.gamma[c] += d;
                    } else {
                        a.beta[c] += d;
                    }
                    work.set_affine(tap, branch, a).unwrap();
                    evaluate(&work)
                };
                report.checked += 1;
                let mut fd = None;
                let mut h = FD_STEP;
                for attempt in 0..3 {
                    let (fp, pp) = at(h);
                    let (fm, pm) = at(-h);
                    let (smooth_p, smooth_m) = (pp == p0, pm == p0);
                    if attempt > 0 || !(smooth_p && smooth_m) {
                        report.kink_adjusted += 1;
                    }
                    if smooth_p && smooth_m {
                        fd = Some([0, 1, 2].map(|k| (fp[k] - fm[k]) / (2.0 * h)));
                        break;
                    }
                    if smooth_p {
                        let (f2, p2) = at(2.0 * h);
                        if p2 == p0 {
                            fd = Some([0, 1, 2].map(|k| (-3.0 * f0[k] + 4.0 * fp[k] - f2[k]) / (2.0 * h)));
                            break;
                        }
                    } else if smooth_m {
                        let (f2, p2) = at(-2.0 * h);
                        if p2 == p0 {
                            fd = Some([0, 1, 2].map(|k| (3.0 * f0[k] - 4.0 * fm[k] + f2[k]) / (2.0 * h)));
                            break;
                        }
                    }
                    h /= 10.0;
                }
                let Some(fd) = fd else {
                    report.unresolved += 1;
                    continue;
                };
                for (k, g) in analytic.iter().enumerate() {
                    let layer = &g.layers[tap.index()];
                    let an = if which == 0 { layer.gamma[c] } else { layer.beta[c] };
                    let rel = (an - fd[k]).abs() / an.abs().max(fd[k].abs()).max(REL_FLOOR);
                    report.worst[k] = report.worst[k].max(rel);
                }
            }
        }
        work.set_affine(tap, branch, base).unwrap();
    }
    report
}
