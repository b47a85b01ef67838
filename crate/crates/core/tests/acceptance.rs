//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use cdtta_core::adaptation::{
    adapt_and_evaluate, correlation_table, ddr_grid, pretrain, run_stream, sample_signals, sample_taps, AdaptConfig,
    AdaptReport, Adapter, BranchMode, PretrainConfig,
};
use cdtta_core::clustering::{bhattacharyya, offline_kmeans, wasserstein2, DomainFeature, Gaussian, Metric};
use cdtta_core::losses::{entropy_loss, DenoiseConfig, LossKind};
use cdtta_core::metrics::best_permutation_agreement;
use cdtta_core::network::{argmax_labels, NormMode, SegNet, Tap};
use cdtta_core::synth::{
    build_eval_split, build_source, build_stream, cyclic_schedule, DomainSpec, SceneSize, Stream,
};
use cdtta_core::tensor::Tensor;

const SEEDS: u64 = 10;
const SEGMENT: usize = 20;
const CYCLES: usize = 10;
const EVAL_PER_DOMAIN: usize = 32;
const CORRELATION_EVAL_PER_DOMAIN: usize = 64;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn names() -> Vec<String> {
    DomainSpec::defaults().into_iter().map(|d| d.name).collect()
}

fn data_seed(seed: u64) -> u64 {
    100 + seed
}

fn default_stream(seed: u64) -> Stream {
    let specs = DomainSpec::defaults();
    build_stream(&specs, &cyclic_schedule(&specs, SEGMENT, CYCLES), SceneSize::default(), data_seed(seed)).unwrap()
}

fn eval_split(seed: u64, per_domain: usize) -> Stream {
    build_eval_split(&DomainSpec::defaults(), per_domain, SceneSize::default(), data_seed(seed)).unwrap()
}

fn checkpoint_bytes(net: &SegNet<f32>) -> Vec<u8> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.cdt");
    net.save_checkpoint(&path).unwrap();
    std::fs::read(path).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn count(flags: &[bool]) -> usize {
    flags.iter().filter(|f| **f).count()
}

fn gradient_soundness() -> Outcome {
    let mut worst = [0.0f64; 3];
    let (mut ok, mut adjusted, mut unresolved) = (0, 0, 0);
    for seed in 0..20 {
        let r = common::fd_check(&common::fd_setup(seed, 5, 32));
        for (w, e) in worst.iter_mut().zip(r.worst) {
            *w = w.max(e);
        }
        adjusted += r.kink_adjusted;
        unresolved += r.unresolved;
        ok += usize::from(r.passes(1e-4));
    }
    outcome(
        ok == 20,
        format!(
            "{ok}/20 seeds; max rel err entropy {:.1e}, max_squares {:.1e}, pseudo_label {:.1e}; \
             {adjusted} kink-adjusted, {unresolved} unresolved",
            worst[0], worst[1], worst[2]
        ),
    )
}

fn analytic_distances() -> Outcome {
    let z = Gaussian::new(0.0, 1.0);
    let b1 = bhattacharyya(z, Gaussian::new(1.0, 1.0)).unwrap();
    let b2 = bhattacharyya(z, Gaussian::new(0.0, 4.0)).unwrap();
    let w = wasserstein2(Gaussian::from_std(0.0, 1.0), Gaussian::from_std(1.0, 3.0));
    let errs = [(b1 - 0.125).abs(), (b2 - 0.25 * (25.0f64 / 16.0).ln()).abs(), (w - 5f64.sqrt()).abs()];
    outcome(
        errs.iter().all(|e| *e <= 1e-12),
        format!("B={b1}, B={b2}, W2={w}; max error {:.1e}", errs.iter().copied().fold(0.0, f64::max)),
    )
}

/// Single-branch α-BN entropy minimization written against the network API.
fn single_branch_entropy_run(net: &SegNet<f32>, images: &[Tensor<f32>], cfg: &AdaptConfig) -> (SegNet<f32>, Vec<Vec<u8>>) {
    let mut net = net.with_branches(1, cfg.alpha).unwrap();
    let mut preds = Vec::new();
    for chunk in images.chunks(cfg.batch_size) {
        let parts: Vec<&Tensor<f32>> = chunk.iter().collect();
        let batch = Tensor::stack(&parts).unwrap();
        let pass = net.forward_with_taps(&batch, 0).unwrap();
        preds.extend(argmax_labels(&pass.probs));
        let mut grad = entropy_loss(&pass.probs).grad_logits;
        let k = (1.0 / chunk.len() as f64) as f32;
        grad.data_mut().iter_mut().for_each(|v| *v *= k);
        let grads = net.backward_affine_only(&pass, &grad).unwrap();
        net.apply_affine_sgd(&grads, cfg.learning_rate as f32).unwrap();
    }
    (net, preds)
}

fn baseline_equivalence(source: &SegNet<f32>) -> Outcome {
    let stream = default_stream(0);
    let images = &stream.images.images[..48];
    let cfg = AdaptConfig {
        branch_mode: BranchMode::Compound,
        k: 1,
        delta: 0.0,
        loss: LossKind::Entropy,
        ..AdaptConfig::default()
    };
    let run = run_stream(source, images, None, &cfg).unwrap();
    let (reference, ref_preds) = single_branch_entropy_run(source, images, &cfg);
    let same_params = checkpoint_bytes(run.adapter.net()) == checkpoint_bytes(&reference);
    let same_preds = run.predictions == ref_preds;

    let frozen_cfg = AdaptConfig {
        alpha: 1.0,
        learning_rate: 0.0,
        ..cfg.clone()
    };
    let adapter = Adapter::new(source, frozen_cfg.clone()).unwrap();
    let source_stats: Vec<_> = source.source_stats().into_values().collect();
    let mut same_source = true;
    for chunk in images.chunks(frozen_cfg.batch_size) {
        let parts: Vec<&Tensor<f32>> = chunk.iter().collect();
        let batch = Tensor::stack(&parts).unwrap();
        let a = adapter.net().forward_with_taps(&batch, 0).unwrap();
        let b = source.forward_mode(&batch, 0, NormMode::Frozen(&source_stats)).unwrap();
        same_source &= a.probs.data().iter().zip(b.probs.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    }
    let frozen_run = run_stream(source, images, None, &frozen_cfg).unwrap();
    let source_preds: Vec<Vec<u8>> = images
        .chunks(frozen_cfg.batch_size)
        .flat_map(|chunk| {
            let parts: Vec<&Tensor<f32>> = chunk.iter().collect();
            let batch = Tensor::stack(&parts).unwrap();
            argmax_labels(&source.forward_mode(&batch, 0, NormMode::Frozen(&source_stats)).unwrap().probs)
        })
        .collect();
    let same_source_preds = frozen_run.predictions == source_preds;
    outcome(
        same_params && same_preds && same_source && same_source_preds,
        format!(
            "compound k=1 vs hand loop: params {same_params}, predictions {same_preds}; \
             alpha=1 lr=0 vs source forward: probabilities {same_source}, predictions {same_source_preds}"
        ),
    )
}

struct SeedRuns {
    oracle: AdaptReport,
    compound: AdaptReport,
    pseudo: AdaptReport,
    pseudo_no_denoise: AdaptReport,
    entropy: AdaptReport,
    after_first_cycle: Agreement,
    after_first_k: Agreement,
    ddr_t0: f64,
    ddr_t3: f64,
    corr_weight: f64,
    corr_mean_prob: f64,
}

/// Modal label of each consecutive `segment`-long run of `labels`.
fn segment_modes(labels: &[usize], segment: usize, k: usize) -> Vec<usize> {
    labels
        .chunks(segment)
        .map(|c| {
            let mut hist = vec![0usize; k];
            c.iter().for_each(|&l| hist[l] += 1);
            (0..k).max_by_key(|&i| (hist[i], std::cmp::Reverse(i))).unwrap()
        })
        .collect()
}

/// Clustering agreement scores measured from sample `from` on.
#[derive(Debug, Clone, Copy)]
struct Agreement {
    kmeans: f64,
    truth: f64,
    recurrence: f64,
}

fn clustering_scores(source: &SegNet<f32>, stream: &Stream, report: &AdaptReport, from: usize) -> Agreement {
    let cfg = &report.config;
    let online: Vec<usize> = report.steps.iter().flat_map(|r| r.pseudo_labels.iter().copied()).collect();
    let truth: Vec<usize> = stream.eval.domains.iter().map(|d| d.unwrap()).collect();
    // Oracle features: same layers and batching, source parameters.
    let mut features = Vec::with_capacity(stream.len());
    for chunk in stream.images.images.chunks(cfg.batch_size) {
        let parts: Vec<&Tensor<f32>> = chunk.iter().collect();
        let batch = Tensor::stack(&parts).unwrap();
        let taps = source.tap_statistics(&batch, 0, &cfg.clustering_layers).unwrap();
        for n in 0..chunk.len() {
            features.push(DomainFeature::from_taps(&taps, &cfg.clustering_layers, n).unwrap());
        }
    }
    let km = offline_kmeans(&features, cfg.k, cfg.metric, cfg.seed).unwrap();
    // Each repeat of a domain segment against that domain's previous
    // occurrence, for repeats whose previous occurrence starts at `from` or later.
    let modes = segment_modes(&online, SEGMENT, cfg.k);
    let domains = DomainSpec::defaults().len();
    let (mut same, mut total) = (0, 0);
    for (s, chunk) in online.chunks(SEGMENT).enumerate().skip(domains) {
        if (s - domains) * SEGMENT < from {
            continue;
        }
        same += chunk.iter().filter(|&&l| l == modes[s - domains]).count();
        total += chunk.len();
    }
    Agreement {
        kmeans: best_permutation_agreement(&online[from..], &km.labels[from..]).unwrap(),
        truth: best_permutation_agreement(&online[from..], &truth[from..]).unwrap(),
        recurrence: same as f64 / total as f64,
    }
}

fn seed_runs(source: &SegNet<f32>, seed: u64) -> SeedRuns {
    let stream = default_stream(seed);
    let eval = eval_split(seed, EVAL_PER_DOMAIN);
    let names = names();
    let run = |cfg: AdaptConfig| adapt_and_evaluate(source, &stream, &eval, &names, &cfg).unwrap().0;
    let base = AdaptConfig {
        seed,
        ..AdaptConfig::default()
    };
    let pseudo = run(base.clone());
    let domains = DomainSpec::defaults().len();
    // The bank is seeded from the first K samples, which all come from the
    // first domain; labels settle once every domain has appeared.
    let after_first_cycle = clustering_scores(source, &stream, &pseudo, domains * SEGMENT);
    let after_first_k = clustering_scores(source, &stream, &pseudo, pseudo.config.k);

    let taps = sample_taps(source, &eval, 0).unwrap();
    let grid = ddr_grid(&taps, &eval.eval.domains).unwrap();
    let ddr_at = |tap: Tap| {
        grid.iter()
            .find(|r| r.layer == tap && r.metric == Metric::Bhattacharyya)
            .unwrap()
            .value
    };

    let corr_eval = eval_split(seed, CORRELATION_EVAL_PER_DOMAIN);
    let signals = sample_signals(source, &corr_eval, 0, &DenoiseConfig::default()).unwrap();
    let table: BTreeMap<String, Option<f64>> =
        correlation_table(&signals).unwrap().into_iter().map(|r| (r.signal, r.pearson)).collect();

    SeedRuns {
        oracle: run(AdaptConfig {
            branch_mode: BranchMode::Oracle,
            ..base.clone()
        }),
        compound: run(AdaptConfig {
            branch_mode: BranchMode::Compound,
            ..base.clone()
        }),
        pseudo_no_denoise: run(AdaptConfig {
            delta: 0.0,
            ..base.clone()
        }),
        entropy: run(AdaptConfig {
            loss: LossKind::Entropy,
            ..base.clone()
        }),
        pseudo,
        after_first_cycle,
        after_first_k,
        ddr_t0: ddr_at(Tap::T0),
        ddr_t3: ddr_at(Tap::T3),
        corr_weight: table["weight"].unwrap_or(f64::NAN),
        corr_mean_prob: table["mean_probability"].unwrap_or(f64::NAN),
    }
}

fn diagonally_dominant(m: &[Vec<f64>]) -> bool {
    (0..m.len()).all(|i| (0..m.len()).all(|j| m[i][i] >= m[j][i]))
}

fn entropy_windows(report: &AdaptReport) -> (f64, f64) {
    let e: Vec<f64> = report.steps.iter().flat_map(|r| r.entropies.iter().copied()).collect();
    let w = e.len() / 5;
    (mean(&e[..w]), mean(&e[e.len() - w..]))
}

fn determinism(source: &SegNet<f32>) -> Outcome {
    let size = SceneSize::default();
    let train = build_source(64, size, 7, 3).unwrap();
    let pcfg = PretrainConfig {
        epochs: 2,
        ..PretrainConfig::default()
    };
    let p1 = checkpoint_bytes(&pretrain(&train, size.classes, &pcfg).unwrap().net);
    let p2 = checkpoint_bytes(&pretrain(&train, size.classes, &pcfg).unwrap().net);

    let specs = DomainSpec::defaults();
    let stream = build_stream(&specs, &cyclic_schedule(&specs, 8, 2), size, 5).unwrap();
    let eval = build_eval_split(&specs, 8, size, 5).unwrap();
    let cfg = AdaptConfig::default();
    let (r1, a1) = adapt_and_evaluate(source, &stream, &eval, &names(), &cfg).unwrap();
    let (r2, a2) = adapt_and_evaluate(source, &stream, &eval, &names(), &cfg).unwrap();
    let reports = r1.to_json().unwrap() == r2.to_json().unwrap();
    let adapted = checkpoint_bytes(a1.net()) == checkpoint_bytes(a2.net());
    outcome(
        p1 == p2 && reports && adapted,
        format!("pretrain checkpoints {}, reports {reports}, adapted checkpoints {adapted}", p1 == p2),
    )
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    results.push((1, "gradient soundness", gradient_soundness()));
    results.push((2, "analytic distances", analytic_distances()));

    let size = SceneSize::default();
    let train = build_source(512, size, 0, 3).unwrap();
    let source = pretrain(&train, size.classes, &PretrainConfig::default()).unwrap().net;

    results.push((3, "baseline equivalence", baseline_equivalence(&source)));

    let runs: Vec<SeedRuns> = (0..SEEDS).map(|s| seed_runs(&source, s)).collect();
    let n = runs.len();

    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let mins = |get: fn(&SeedRuns) -> Agreement| {
        let a: Vec<Agreement> = runs.iter().map(get).collect();
        [
            min(&a.iter().map(|x| x.kmeans).collect::<Vec<_>>()),
            min(&a.iter().map(|x| x.truth).collect::<Vec<_>>()),
            min(&a.iter().map(|x| x.recurrence).collect::<Vec<_>>()),
        ]
    };
    let [km, tr, rc] = mins(|r| r.after_first_cycle);
    let [km_k, tr_k, rc_k] = mins(|r| r.after_first_k);
    let ddr_ok: Vec<bool> = runs.iter().map(|r| r.ddr_t0 > 2.0).collect();
    results.push((
        4,
        "clustering fidelity",
        outcome(
            count(&ddr_ok) == n && km >= 0.95 && tr >= 0.90 && rc >= 0.95,
            format!(
                "min over {n} seeds after the first cycle: vs k-means {km:.3}, vs truth {tr:.3}, recurrence {rc:.3} \
                 (after the first K samples: {km_k:.3}, {tr_k:.3}, {rc_k:.3}); DDR(t0) > 2 on {}/{n}",
                count(&ddr_ok)
            ),
        ),
    ));

    let dominant: Vec<bool> = runs.iter().map(|r| diagonally_dominant(&r.oracle.eval.branch_matrix)).collect();
    let beats: Vec<bool> = runs.iter().map(|r| r.oracle.eval.mean_miou >= r.compound.eval.mean_miou).collect();
    let both: Vec<bool> = dominant.iter().zip(&beats).map(|(a, b)| *a && *b).collect();
    results.push((
        5,
        "domain-specific branches",
        outcome(
            count(&both) >= 8,
            format!(
                "{}/{n} seeds (diagonal dominance {}/{n}, oracle >= compound {}/{n})",
                count(&both),
                count(&dominant),
                count(&beats)
            ),
        ),
    ));

    let pseudo_wins: Vec<bool> = runs.iter().map(|r| r.pseudo.eval.mean_miou >= r.compound.eval.mean_miou).collect();
    let denoise_drop: Vec<f64> =
        runs.iter().map(|r| r.pseudo_no_denoise.eval.mean_miou - r.pseudo.eval.mean_miou).collect();
    let worst_drop = denoise_drop.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    results.push((
        6,
        "pseudo vs compound",
        outcome(
            count(&pseudo_wins) >= 8 && worst_drop <= 0.005,
            format!(
                "pseudo >= compound on {}/{n}; largest mIoU drop from denoising {:.2} points",
                count(&pseudo_wins),
                100.0 * worst_drop
            ),
        ),
    ));

    let corr_ok: Vec<bool> = runs
        .iter()
        .map(|r| r.corr_weight > 0.3 && r.corr_weight > r.corr_mean_prob)
        .collect();
    results.push((
        7,
        "weight-accuracy correlation",
        outcome(
            count(&corr_ok) >= 8,
            format!(
                "{}/{n} seeds; mean r(w) {:.3}, mean r(mean prob) {:.3}",
                count(&corr_ok),
                mean(&runs.iter().map(|r| r.corr_weight).collect::<Vec<_>>()),
                mean(&runs.iter().map(|r| r.corr_mean_prob).collect::<Vec<_>>())
            ),
        ),
    ));

    let ordered: Vec<bool> = runs.iter().map(|r| r.ddr_t0 > r.ddr_t3).collect();
    results.push((
        8,
        "DDR layer ordering",
        outcome(
            count(&ordered) == n,
            format!(
                "{}/{n} seeds; DDR t0 {:.2}..{:.2}, t3 {:.2}..{:.2}",
                count(&ordered),
                min(&runs.iter().map(|r| r.ddr_t0).collect::<Vec<_>>()),
                runs.iter().map(|r| r.ddr_t0).fold(f64::NEG_INFINITY, f64::max),
                min(&runs.iter().map(|r| r.ddr_t3).collect::<Vec<_>>()),
                runs.iter().map(|r| r.ddr_t3).fold(f64::NEG_INFINITY, f64::max)
            ),
        ),
    ));

    let descent: Vec<bool> = runs
        .iter()
        .map(|r| {
            let (first, last) = entropy_windows(&r.entropy);
            last < first
        })
        .collect();
    results.push((9, "entropy descent", outcome(count(&descent) >= 8, format!("{}/{n} seeds", count(&descent)))));

    results.push((10, "determinism", determinism(&source)));

    let mut failed = 0;
    for (id, name, o) in &results {
        println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed in {:.0} s", results.len() - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
