use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cdtta_core::adaptation::AdaptReport;
use cdtta_core::network::SegNet;
use tempfile::TempDir;

const SMALL: &str = r#"{
    "data.size.height": 32, "data.size.width": 32, "data.size.classes": 3,
    "data.source_train": 24, "data.source_val": 8, "data.eval_per_domain": 4,
    "data.segment": 4, "data.cycles": 2, "pretrain.epochs": 2
}"#;

fn cdtta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdtta")).args(args).output().expect("spawn cdtta")
}

fn ok(args: &[&str]) -> Output {
    let out = cdtta(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: TempDir,
    root: PathBuf,
}

impl Fixture {
    fn config(&self) -> PathBuf {
        self.root.join("small.json")
    }
    fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    fn checkpoint(&self) -> PathBuf {
        self.root.join("pre").join("checkpoint.cdt")
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("small.json"), SMALL).unwrap();
        let f = Fixture { _dir: dir, root };
        ok(&["gen-data", "--out", s(&f.data()), "--config", s(&f.config())]);
        ok(&["pretrain", "--data", s(&f.data()), "--out", s(&f.root.join("pre")), "--config", s(&f.config())]);
        f
    })
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn adapt(extra: &[&str]) -> (TempDir, AdaptReport) {
    let f = fixture();
    let out = tempfile::tempdir().unwrap();
    let dir = out.path().join("run");
    let (data, ckpt) = (f.data(), f.checkpoint());
    let mut args = vec!["adapt", "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&dir)];
    args.extend_from_slice(extra);
    ok(&args);
    let report = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    (out, report)
}

#[test]
fn gen_data_is_reproducible_and_refuses_overwrite() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let again = tmp.path().join("again");
    ok(&["gen-data", "--out", s(&again), "--config", s(&f.config())]);
    assert_eq!(tree(&again), tree(&f.data()));

    let out = cdtta(&["gen-data", "--out", s(&again), "--config", s(&f.config())]);
    assert_eq!(out.status.code(), Some(2));
    ok(&["gen-data", "--out", s(&again), "--config", s(&f.config()), "--force"]);

    let other = tmp.path().join("other");
    ok(&["gen-data", "--out", s(&other), "--config", s(&f.config()), "--seed", "9"]);
    assert_ne!(tree(&other), tree(&f.data()));
}

#[test]
fn bad_configuration_exits_2_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cdtta(&["gen-data", "--out", s(&tmp.path().join("d")), "--set", "data.domainz=[]"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.domainz"));

    let out = cdtta(&[
        "gen-data",
        "--out",
        s(&tmp.path().join("d")),
        "--set",
        r#"data.schedule=[{"domain":"fog","length":2}]"#,
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fog"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cdtta(&["pretrain", "--data", s(&tmp.path().join("none")), "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invalid_branch_mode_is_a_usage_error() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = cdtta(&[
        "adapt",
        "--data",
        s(&f.data()),
        "--checkpoint",
        s(&f.checkpoint()),
        "--out",
        s(tmp.path()),
        "--branch-mode",
        "sometimes",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_thread_count_is_a_config_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_cdtta"))
        .args(["gen-data", "--out", "/nonexistent/never"])
        .env("CDTTA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn pretrain_is_deterministic_and_loadable() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    ok(&["pretrain", "--data", s(&f.data()), "--out", s(tmp.path()), "--config", s(&f.config()), "--force"]);
    let a = fs::read(tmp.path().join("checkpoint.cdt")).unwrap();
    assert_eq!(a, fs::read(f.checkpoint()).unwrap());
    let net = SegNet::<f32>::load_checkpoint(&f.checkpoint()).unwrap();
    assert_eq!(net.classes(), 3);
    let curve = fs::read_to_string(tmp.path().join("training_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(tmp.path().join("timing.json").exists());
}

#[test]
fn adapt_is_byte_reproducible() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let args = |d: &Path| -> Vec<String> {
        ["adapt", "--data", s(&f.data()), "--checkpoint", s(&f.checkpoint()), "--out", s(d)]
            .map(String::from)
            .to_vec()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    ok(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    for file in ["report.json", "steps.csv", "adapted.cdt"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (_t, r) = adapt(&["--lr", "0"]);
    assert!(r.parameter_deltas.iter().all(|d| *d == 0.0));
    assert_eq!(r.config.learning_rate, 0.0);
}

#[test]
fn compound_single_branch_matches_extra_idle_branches() {
    let (_a, one) = adapt(&["--branch-mode", "compound", "--k", "1"]);
    let (_b, three) = adapt(&["--branch-mode", "compound", "--k", "3"]);
    assert_eq!(one.steps, three.steps);
    assert_eq!(one.eval.per_domain_miou, three.eval.per_domain_miou);
    assert_eq!(&three.parameter_deltas[1..], &[0.0, 0.0]);
}

#[test]
fn analyze_emits_full_grid_and_correlations() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    ok(&["analyze", "--data", s(&f.data()), "--checkpoint", s(&f.checkpoint()), "--out", s(tmp.path())]);
    let ddr = fs::read_to_string(tmp.path().join("ddr.csv")).unwrap();
    assert_eq!(ddr.lines().count(), 1 + 16);
    for metric in ["bhattacharyya", "euclidean", "wasserstein2", "stats_divergence"] {
        for tap in ["t0", "t1", "t2", "t3"] {
            assert!(ddr.lines().any(|l| l.starts_with(&format!("{tap},{metric},"))), "{tap} {metric}");
        }
    }
    let corr = fs::read_to_string(tmp.path().join("correlations.csv")).unwrap();
    let signals: Vec<&str> = corr.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(signals, ["weight", "mean_probability", "entropy"]);
    let features = fs::read_to_string(tmp.path().join("features.csv")).unwrap();
    // 12 eval samples x (16 + 32 + 32 + 64) channels
    assert_eq!(features.lines().count(), 1 + 12 * 144);
}

#[test]
fn analyze_single_domain_surfaces_ddr_error() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("one");
    ok(&[
        "gen-data",
        "--out",
        s(&data),
        "--config",
        s(&f.config()),
        "--set",
        r#"data.domains=[{"name":"only","brightness_gain":0.8,"contrast":1.0,"noise_std":0.02,"channel_tint":[0,0,0]}]"#,
    ]);
    let out = cdtta(&["analyze", "--data", s(&data), "--checkpoint", s(&f.checkpoint()), "--out", s(&tmp.path().join("a"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("DDR"));
}
