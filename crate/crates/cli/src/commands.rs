use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use cdtta_core::adaptation::{
    adapt_and_evaluate, correlation_table, ddr_grid, pretrain, sample_signals, sample_taps, source_miou,
};
use cdtta_core::clustering::{offline_kmeans, write_feature_dump, DomainFeature, FeatureRow};
use cdtta_core::metrics::best_permutation_agreement;
use cdtta_core::network::{SegNet, Tap};
use cdtta_core::synth::{build_dataset, load_dataset, save_dataset, Dataset, Split};
use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::Settings;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.cdt";
pub const CURVE_FILE: &str = "training_curve.csv";
pub const PRETRAIN_REPORT_FILE: &str = "pretrain.json";
pub const REPORT_FILE: &str = "report.json";
pub const STEPS_FILE: &str = "steps.csv";
pub const ADAPTED_FILE: &str = "adapted.cdt";
pub const DDR_FILE: &str = "ddr.csv";
pub const CORRELATION_FILE: &str = "correlations.csv";
pub const FEATURES_FILE: &str = "features.csv";
pub const ANALYSIS_FILE: &str = "analysis.json";
pub const TIMING_FILE: &str = "timing.json";

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Args)]
pub struct Common {
    /// JSON object of flat dotted keys, e.g. {"adapt.k": 3}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// KEY=VALUE override applied after the config file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Samples per domain segment of the cyclic stream.
    #[arg(long)]
    pub segment: Option<usize>,
    /// Repetitions of the domain cycle.
    #[arg(long)]
    pub cycles: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = ["entropy", "max_squares", "pseudo_label"])]
    pub loss: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_parser = ["pseudo", "oracle", "compound"])]
    pub branch_mode: Option<String>,
    #[arg(long, value_parser = ["bhattacharyya", "euclidean", "wasserstein2", "stats_divergence"])]
    pub metric: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "eval", value_parser = ["eval", "stream", "source_val"])]
    pub split: String,
    /// BN branch used for every forward pass.
    #[arg(long, default_value_t = 0)]
    pub branch: usize,
    #[command(flatten)]
    pub common: Common,
}

fn settings(common: &Common, flags: &[(&str, Option<Value>)]) -> Result<Settings, CliError> {
    let mut s = Settings::load(common.config.as_deref(), &common.set)?;
    for (key, value) in flags {
        if let Some(v) = value {
            s.set(key, v.clone())?;
        }
    }
    Ok(s)
}

fn flag<T: Serialize>(v: &Option<T>) -> Option<Value> {
    v.as_ref().map(|v| serde_json::to_value(v).expect("plain flag value"))
}

/// Creates `dir` and refuses to clobber any of `files` unless `force`.
fn prepare_out(dir: &Path, files: &[&str], force: bool) -> Result<(), CliError> {
    if !force {
        if let Some(f) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
            return Err(CliError::Config(format!("{} exists (use --force to overwrite)", f.display())));
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_data(dir: &Path) -> Result<Dataset, CliError> {
    if !dir.join("manifest.json").exists() {
        return Err(CliError::Data(format!("no dataset at {}", dir.display())));
    }
    Ok(load_dataset(dir)?)
}

fn load_net(path: &Path, ds: &Dataset) -> Result<SegNet<f32>, CliError> {
    let net = SegNet::<f32>::load_checkpoint(path)?;
    if net.classes() != ds.config.size.classes {
        return Err(CliError::Data(format!(
            "checkpoint has {} classes, dataset {}",
            net.classes(),
            ds.config.size.classes
        )));
    }
    Ok(net)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn write_timing(dir: &Path, command: &str, started: Instant) -> Result<(), CliError> {
    write_json(
        &dir.join(TIMING_FILE),
        &json!({ "command": command, "wall_seconds": started.elapsed().as_secs_f64() }),
    )
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let s = settings(
        &args.common,
        &[
            ("data.seed", flag(&args.seed)),
            ("data.segment", flag(&args.segment)),
            ("data.cycles", flag(&args.cycles)),
        ],
    )?;
    let config = s.data_config()?;
    let ds = build_dataset(&config)?;
    save_dataset(&ds, &args.out, args.common.force)?;
    println!(
        "wrote {}: {} stream, {} eval, {} source-train samples",
        args.out.display(),
        ds.split(Split::Stream).len(),
        ds.split(Split::Eval).len(),
        ds.split(Split::SourceTrain).len()
    );
    Ok(())
}

pub fn pretrain_cmd(args: &PretrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let s = settings(
        &args.common,
        &[
            ("pretrain.epochs", flag(&args.epochs)),
            ("pretrain.learning_rate", flag(&args.lr)),
            ("pretrain.seed", flag(&args.seed)),
        ],
    )?;
    let ds = load_data(&args.data)?;
    prepare_out(&args.out, &[CHECKPOINT_FILE, CURVE_FILE, PRETRAIN_REPORT_FILE], args.common.force)?;
    let trained = pretrain(ds.split(Split::SourceTrain), ds.config.size.classes, &s.pretrain)?;
    let val = source_miou(&trained.net, ds.split(Split::SourceVal), s.pretrain.batch_size)?;
    trained.net.save_checkpoint(&args.out.join(CHECKPOINT_FILE))?;
    let mut curve = BufWriter::new(File::create(args.out.join(CURVE_FILE))?);
    writeln!(curve, "epoch,loss")?;
    for (i, l) in trained.epoch_losses.iter().enumerate() {
        writeln!(curve, "{},{l}", i + 1)?;
    }
    curve.flush()?;
    write_json(
        &args.out.join(PRETRAIN_REPORT_FILE),
        &json!({
            "version": VERSION,
            "config": s.pretrain,
            "data_seed": ds.config.seed,
            "epoch_losses": trained.epoch_losses,
            "source_val_miou": val,
        }),
    )?;
    write_timing(&args.out, "pretrain", started)?;
    println!("source validation mIoU {val:.4}");
    Ok(())
}

pub fn adapt_cmd(args: &AdaptArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let s = settings(
        &args.common,
        &[
            ("adapt.loss", flag(&args.loss)),
            ("adapt.alpha", flag(&args.alpha)),
            ("adapt.eta", flag(&args.eta)),
            ("adapt.delta", flag(&args.delta)),
            ("adapt.k", flag(&args.k)),
            ("adapt.learning_rate", flag(&args.lr)),
            ("adapt.batch_size", flag(&args.batch_size)),
            ("adapt.branch_mode", flag(&args.branch_mode)),
            ("adapt.metric", flag(&args.metric)),
            ("adapt.seed", flag(&args.seed)),
        ],
    )?;
    s.adapt.validate()?;
    let ds = load_data(&args.data)?;
    let net = load_net(&args.checkpoint, &ds)?;
    prepare_out(&args.out, &[REPORT_FILE, STEPS_FILE, ADAPTED_FILE], args.common.force)?;
    let names: Vec<String> = ds.config.domains.iter().map(|d| d.name.clone()).collect();
    let (report, adapter) =
        adapt_and_evaluate(&net, ds.split(Split::Stream), ds.split(Split::Eval), &names, &s.adapt)?;
    fs::write(args.out.join(REPORT_FILE), report.to_json()? + "\n")?;
    let mut steps = BufWriter::new(File::create(args.out.join(STEPS_FILE))?);
    report.write_steps_csv(&mut steps)?;
    steps.flush()?;
    adapter.net().save_checkpoint(&args.out.join(ADAPTED_FILE))?;
    write_timing(&args.out, "adapt", started)?;
    println!("mean eval mIoU {:.4} over {} steps", report.eval.mean_miou, report.steps.len());
    Ok(())
}

pub fn analyze_cmd(args: &AnalyzeArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let s = settings(&args.common, &[])?;
    s.adapt.validate()?;
    let split = match args.split.as_str() {
        "stream" => Split::Stream,
        "source_val" => Split::SourceVal,
        _ => Split::Eval,
    };
    let ds = load_data(&args.data)?;
    let net = load_net(&args.checkpoint, &ds)?;
    if args.branch >= net.k() {
        return Err(CliError::Config(format!("--branch {} but the checkpoint has {} branches", args.branch, net.k())));
    }
    prepare_out(&args.out, &[DDR_FILE, CORRELATION_FILE, FEATURES_FILE, ANALYSIS_FILE], args.common.force)?;
    let data = ds.split(split);
    let taps = sample_taps(&net, data, args.branch)?;
    let grid = ddr_grid(&taps, &data.eval.domains)?;
    let signals = sample_signals(&net, data, args.branch, &s.adapt.denoise())?;
    let correlations = correlation_table(&signals)?;

    let features: Vec<DomainFeature> = (0..data.len())
        .map(|i| DomainFeature::from_taps(&taps[i], &s.adapt.clustering_layers, 0))
        .collect::<Result<_, _>>()?;
    let clusters = offline_kmeans(&features, s.adapt.k.min(features.len()).max(1), s.adapt.metric, s.adapt.seed)?;
    let truth: Vec<usize> = data.eval.domains.iter().map(|d| d.unwrap_or(0)).collect();
    let agreement = best_permutation_agreement(&clusters.labels, &truth)?;

    let mut ddr_csv = BufWriter::new(File::create(args.out.join(DDR_FILE))?);
    writeln!(ddr_csv, "layer,metric,value")?;
    for r in &grid {
        writeln!(ddr_csv, "{},{},{}", r.layer, r.metric, r.value)?;
    }
    ddr_csv.flush()?;
    let mut corr_csv = BufWriter::new(File::create(args.out.join(CORRELATION_FILE))?);
    writeln!(corr_csv, "signal,pearson")?;
    for r in &correlations {
        writeln!(corr_csv, "{},{}", r.signal, r.pearson.map(|v| v.to_string()).unwrap_or_default())?;
    }
    corr_csv.flush()?;
    let mut dump = BufWriter::new(File::create(args.out.join(FEATURES_FILE))?);
    write_feature_dump(
        &mut dump,
        taps.iter().enumerate().flat_map(|(i, t)| {
            let (d, p) = (data.eval.domains[i], clusters.labels[i]);
            Tap::ALL.into_iter().map(move |layer| FeatureRow {
                sample_id: i,
                true_domain: d,
                pseudo_domain: Some(p),
                layer,
                stats: &t[&layer][0],
            })
        }),
    )?;
    dump.flush()?;
    write_json(
        &args.out.join(ANALYSIS_FILE),
        &json!({
            "version": VERSION,
            "split": split.name(),
            "branch": args.branch,
            "config": s.adapt,
            "ddr": grid,
            "correlations": correlations,
            "kmeans_agreement": agreement,
            "signals": signals,
        }),
    )?;
    write_timing(&args.out, "analyze", started)?;
    for r in &correlations {
        println!("corr({}, accuracy) = {}", r.signal, r.pearson.map(|v| format!("{v:.3}")).unwrap_or("undefined".into()));
    }
    Ok(())
}
