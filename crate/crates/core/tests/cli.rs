mod common;

use std::path::{Path, PathBuf};

use common::*;
use sward::data::{load_manifest, Schema, Split};
use sward::model::Checkpoint;
use sward::train::{split_loss, LossWeights, TrainLog};

const SMALL: &str = r#"{"model": {"input_size": 16, "conv_channels": [8, 16]},
    "augment": {"output_size": 16},
    "pretrain": {"epochs": 2, "batch_size": 8},
    "finetune": {"epochs": 5, "batch_size": 8}}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    data: PathBuf,
    config: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let data = root.join("data");
    synth(&data, 30, 16, 16, 4, split(1, 1, 1));
    let config = root.join("config.json");
    std::fs::write(&config, SMALL).unwrap();
    Fixture { _dir: dir, root, data, config }
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = run(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    stderr
}

fn finetuned(f: &Fixture) -> PathBuf {
    let out = f.root.join("ft.swrd");
    ok(&["finetune", "--config", s(&f.config), "--manifest", s(&f.data.join("manifest.csv")), "--out", s(&out)]);
    out
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(dir_bytes(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn synth_without_labels_writes_header_only_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["synth", "--out", s(&out), "--labeled", "0", "--unlabeled", "3", "--size", "16"]);
    let text = std::fs::read_to_string(out.join("manifest.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(load_manifest(out.join("manifest.csv"), Schema::Irish3).unwrap().records.is_empty());
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synth", "--out", s(out), "--labeled", "6", "--unlabeled", "4", "--size", "16", "--seed", "11"]);
    }
    let (x, y) = (dir_bytes(&a), dir_bytes(&b));
    assert_eq!(x.len(), 6 + 4 + 2);
    assert_eq!(x, y);
}

#[test]
fn missing_manifest_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let err = fails_with(&["finetune", "--manifest", s(&missing), "--out", s(&dir.path().join("o.swrd"))], 2);
    assert!(err.contains("nowhere.csv"), "{err}");
}

#[test]
fn undecodable_image_is_an_input_error() {
    let f = fixture();
    let ckpt = finetuned(&f);
    let bad = f.root.join("bad.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let err = fails_with(&["predict", "--ckpt", s(&ckpt), "--image", s(&bad)], 2);
    assert!(err.contains("bad.png"), "{err}");
}

#[test]
fn incompatible_init_checkpoint_is_rejected() {
    let f = fixture();
    let pre = f.root.join("pre.swrd");
    ok(&["pretrain", "--config", s(&f.config), "--unlabeled", s(&f.data.join("unlabeled.csv")), "--out", s(&pre)]);
    // default (wider) architecture cannot take the small trunk
    let out = f.root.join("ft.swrd");
    let err = fails_with(
        &["finetune", "--manifest", s(&f.data.join("manifest.csv")), "--init", s(&pre), "--out", s(&out), "--epochs", "1"],
        3,
    );
    assert!(err.contains("conv"), "{err}");
    assert!(!out.exists());
}

#[test]
fn empty_source_selection_exits_4() {
    let f = fixture();
    let ckpt = finetuned(&f);
    let err = fails_with(
        &[
            "eval",
            "--ckpt",
            s(&ckpt),
            "--manifest",
            s(&f.data.join("manifest.csv")),
            "--source",
            "phone",
            "--report",
            s(&f.root.join("r")),
        ],
        4,
    );
    assert!(err.contains("phone"), "{err}");
}

#[test]
fn finetune_log_and_best_checkpoint() {
    let f = fixture();
    let ckpt_path = finetuned(&f);
    let log = TrainLog::read_jsonl(format!("{}.log.jsonl", ckpt_path.display())).unwrap();
    assert_eq!(log.entries.len(), 5);
    assert!(log.entries.iter().enumerate().all(|(i, e)| e.epoch == i + 1 && e.phase == "finetune"));
    let best = log.entries.iter().filter_map(|e| e.val_loss).fold(f64::INFINITY, f64::min);

    let manifest = load_manifest(f.data.join("manifest.csv"), Schema::Irish3).unwrap();
    let ckpt = Checkpoint::load(&ckpt_path).unwrap();
    let (val, _) = split_loss(&ckpt, &manifest, Split::Val, &LossWeights::default()).unwrap();
    assert!((val - best).abs() <= 1e-6 * best.max(1.0), "checkpoint val loss {val}, best logged {best}");

    let sidecar = std::fs::read_to_string(format!("{}.config.json", ckpt_path.display())).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&sidecar).unwrap();
    assert_eq!(cfg["finetune"]["epochs"], 5);
}

#[test]
fn predict_matches_eval_and_is_repeatable() {
    let f = fixture();
    let ckpt = finetuned(&f);
    let report = f.root.join("report");
    ok(&["eval", "--ckpt", s(&ckpt), "--manifest", s(&f.data.join("manifest.csv")), "--report", s(&report)]);
    let (header, rows) = read_csv(&report.join("predictions.csv"));
    let row = &rows[0];
    let image = f.data.join(&row[0]);

    let first = ok(&["predict", "--ckpt", s(&ckpt), "--image", s(&image)]);
    let second = ok(&["predict", "--ckpt", s(&ckpt), "--image", s(&image)]);
    assert_eq!(first, second);
    assert_eq!(first.lines().count(), 1);

    let v: serde_json::Value = serde_json::from_str(&first).unwrap();
    let comp = v["composition"].as_object().unwrap();
    let total: f64 = comp.values().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() <= 0.01, "{total}");
    for (i, name) in header.iter().enumerate().skip(1) {
        let expected = num(&row[i]);
        let got = match name.as_str() {
            "total_mass" | "height" => v[name].as_f64().unwrap(),
            species => comp[species].as_f64().unwrap(),
        };
        assert!((got - expected).abs() <= 1e-4 * expected.abs().max(1.0), "{name}: {got} vs {expected}");
    }
}
