use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use genrel_core::checkpoint::Checkpoint;
use genrel_core::config::{RunConfig, RESOLVED_CONFIG};
use genrel_core::dataset::load_dataset;
use genrel_core::drift::DriftReport;
use genrel_core::heads::LabelSpace;
use genrel_core::splits::{validate_split, SplitManifest};

const SMALL: &str = r#"
[synthetic]
drugs = 24
pairs = 80
seed = 3

[split]
kind = "s2"
test_fraction = 0.25

[train]
epochs = 2
batch_size = 16
patience = 0

[train.model]
d = 8
heads = 2

[[train.model.streams]]
name = "chem"
kind = "mock"
width = 8
max_len = 10

[[train.model.streams]]
name = "mol"
kind = "mock"
width = 8
max_len = 10

[drift]
n_probes = 40

[gradcheck]
pairs = 2
"#;

fn genrel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genrel")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> serde_json::Value {
    let out = genrel(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    assert_eq!(out.status.code(), Some(1));
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(v["error"]["message"].is_string());
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let path = root.join("run.toml");
        std::fs::write(&path, config).unwrap();
        Self {
            _dir: dir,
            root,
            config: path,
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn full_pipeline() {
    let ws = Workspace::new(SMALL);
    let cfg = s(&ws.config);

    let fx = ws.dir("fixtures");
    let v = ok(&["fixtures", "--config", cfg, "--out", s(&fx)]);
    assert_eq!(v["pairs"], 80);
    let data = fx.join("pairs.csv");
    let (ds, _) = load_dataset(&data, LabelSpace::binary(false)).unwrap();
    assert_eq!(ds.len(), 80);

    let sp = ws.dir("split");
    ok(&["split", "--config", cfg, "--dataset", s(&data), "--out", s(&sp), "--seed", "5"]);
    let manifest = sp.join("manifest.json");
    let m = SplitManifest::load(&manifest).unwrap();
    assert!(validate_split(&ds, &m).unwrap().is_empty());
    let echoed = RunConfig::load(&sp.join(RESOLVED_CONFIG)).unwrap();
    assert_eq!(echoed.split.seed, 5);
    assert_eq!(echoed.dataset.as_deref(), Some(data.as_path()));

    let tr = ws.dir("train");
    let v = ok(&[
        "train", "--config", cfg, "--dataset", s(&data), "--manifest", s(&manifest), "--out", s(&tr),
        "--fusion", "twoway_tied", "--freeze", "r",
    ]);
    assert_eq!(v["epochs"], 2);
    let best = tr.join("best.json");
    let ckpt = Checkpoint::load(&best).unwrap();
    assert_eq!(ckpt.history.len(), ckpt.epoch);
    assert!(tr.join("history.json").exists());
    let before = std::fs::read(tr.join("best.bin")).unwrap();

    let ev = ws.dir("eval");
    let v = ok(&["eval", "--config", cfg, "--dataset", s(&data), "--checkpoint", s(&best), "--manifest", s(&manifest), "--out", s(&ev)]);
    assert!(v["metrics"]["acc"].is_number());
    let preds: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(preds.as_array().unwrap().len(), m.test.len());

    // a different corpus from the same generator
    let other = ws.dir("other");
    ok(&["fixtures", "--config", cfg, "--seed", "11", "--out", s(&other)]);
    let te = ws.dir("transfer");
    ok(&["transfer-eval", "--config", cfg, "--dataset", s(&other.join("pairs.csv")), "--checkpoint", s(&best), "--out", s(&te)]);
    assert!(te.join("metrics.json").exists());
    assert_eq!(std::fs::read(tr.join("best.bin")).unwrap(), before);

    let dr = ws.dir("drift");
    let v = ok(&["drift", "--config", cfg, "--dataset", s(&data), "--checkpoint", s(&best), "--out", s(&dr)]);
    assert_eq!(v["verdict"], "holds");
    let report: DriftReport = serde_json::from_slice(&std::fs::read(dr.join("drift.json")).unwrap()).unwrap();
    assert_eq!(report.deltas[0], 0.0);
    assert_eq!(report.adaptive, vec![1]);

    let gc = ws.dir("gradcheck");
    let v = ok(&["gradcheck", "--config", cfg, "--out", s(&gc), "--fusion", "oneway_t_from_r"]);
    assert_eq!(v["passed"], true);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(genrel(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(genrel(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(genrel(&["split", "--split", "s9"]).status.code(), Some(2));
    assert_eq!(genrel(&[]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_with_one_and_json() {
    let ws = Workspace::new(SMALL);
    let out = genrel(&["split", "--dataset", s(&ws.dir("missing.csv")), "--out", s(&ws.dir("a"))]);
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let bad = Workspace::new("[train]\nepoch = 3\n");
    let out = genrel(&["split", "--config", s(&bad.config), "--out", s(&bad.dir("b"))]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");

    let out = genrel(&["split", "--config", s(&ws.config), "--test-fraction", "1.5", "--out", s(&ws.dir("c"))]);
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn failed_gradient_check_exits_with_one() {
    let ws = Workspace::new(&format!("{SMALL}\n[gradcheck.options]\ntolerance = 1e-300\n"));
    let out = genrel(&["gradcheck", "--config", s(&ws.config), "--out", s(&ws.dir("g"))]);
    error_json(&out);
    assert!(ws.dir("g").join("gradcheck.json").exists());
}

#[test]
fn manifest_for_another_dataset_is_rejected() {
    let ws = Workspace::new(SMALL);
    let cfg = s(&ws.config);
    ok(&["split", "--config", cfg, "--out", s(&ws.dir("sp"))]);
    ok(&["fixtures", "--config", cfg, "--seed", "9", "--out", s(&ws.dir("fx"))]);
    let out = genrel(&[
        "train", "--config", cfg, "--dataset", s(&ws.dir("fx").join("pairs.csv")),
        "--manifest", s(&ws.dir("sp").join("manifest.json")), "--out", s(&ws.dir("tr")),
    ]);
    assert_eq!(error_json(&out)["error"]["kind"], "invalid_manifest");
}
