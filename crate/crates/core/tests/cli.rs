//! End-to-end runs of the command-line binary on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::{json, Value};

fn run(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_gated-detect"))
        .args(args)
        .output()
        .expect("binary runs");
    out.status.code().expect("exited normally")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn tiny_config(dir: &Path, lambda: f64) -> String {
    let path = dir.join(format!("tiny_{lambda}.json"));
    let cfg = json!({
        "num_scenes": 2,
        "eval_scenes": 1,
        "scene": {"width": 256, "height": 256},
        "train": {"lambda": lambda, "sgd": {"epochs": 1}},
    });
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["calibrate", "--stats", "/no/such/stats.json", "--out", s(&out)]), 2);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"num_scene": 3}"#).unwrap();
    assert_eq!(run(&["--config", s(&bad), "synth", "--out", s(&out)]), 3);

    fs::write(&bad, r#"{"train": {"lambda": -1}, "calibration_k": 0}"#).unwrap();
    assert_eq!(run(&["--config", s(&bad), "synth", "--out", s(&out)]), 3);

    assert_eq!(run(&["synth"]), 3);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn calibrate_constant_half_maps() {
    let dir = tempfile::tempdir().unwrap();
    let stats = dir.path().join("stats.json");
    let window: Vec<[f64; 2]> = vec![[0.5, 0.0]; 50];
    fs::write(&stats, json!({"capacity": 2000, "window": window}).to_string()).unwrap();
    let out = dir.path().join("cal");
    assert_eq!(run(&["calibrate", "--stats", s(&stats), "--k", "4", "--out", s(&out)]), 0);
    let cal = read_json(&out.join("calibration.json"));
    assert_eq!(cal["threshold"], json!(0.0625));
    assert_eq!(cal["window"], json!(50));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["command"], json!("calibrate"));
    assert_eq!(summary["result"]["threshold"], json!(0.0625));
}

/// synth → train → calibrate → infer → sweep → bench, twice, with byte comparisons.
#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 4.0);
    let pass = |tag: &str| {
        let root = dir.path().join(tag);
        let (data, run_dir, cal) = (root.join("data"), root.join("run"), root.join("cal"));
        assert_eq!(run(&["--config", &cfg, "synth", "--out", s(&data)]), 0);
        assert_eq!(run(&["--config", &cfg, "train", "--data", s(&data.join("train")), "--out", s(&run_dir)]), 0);
        let ckpt = run_dir.join("model.ckpt");
        assert_eq!(
            run(&["calibrate", "--stats", s(&run_dir.join("stats.json")), "--checkpoint", s(&ckpt), "--out", s(&cal)]),
            0
        );
        root
    };
    let a = pass("a");
    let b = pass("b");
    for f in ["data/train/scene_0001.pgm", "data/train/manifest.json", "run/model.ckpt", "run/stats.json", "run/summary.json", "cal/calibration.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let ckpt = a.join("run/model.ckpt");
    let scene = a.join("data/eval/scene_0000.pgm");
    let ann = a.join("data/eval/scene_0000.json");
    let infer = a.join("infer");
    assert_eq!(
        run(&["infer", "--checkpoint", s(&ckpt), "--threshold", "1.0", "--scene", s(&scene), "--annotation", s(&ann), "--out", s(&infer)]),
        0
    );
    assert_eq!(read_json(&infer.join("detections.json")), json!([]));
    assert_eq!(read_json(&infer.join("gate_report.json"))["skip_ratio"], json!(1.0));

    let t_star = read_json(&a.join("cal/calibration.json"))["threshold"].as_f64().unwrap();
    let sweep_cfg = dir.path().join("sweep.json");
    let mut c: Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    c["sweep_thresholds"] = json!([0.0, t_star, 1.0]);
    fs::write(&sweep_cfg, c.to_string()).unwrap();
    let rows = |out: &Path| -> Vec<Vec<String>> {
        assert_eq!(
            run(&["--config", s(&sweep_cfg), "sweep", "--checkpoint", s(&ckpt), "--data", s(&a.join("data/eval")), "--out", s(out)]),
            0
        );
        let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("threshold,skip_ratio,gate_precision,gate_recall,mAP,fps"));
        // everything except the timing column is reproducible
        lines.map(|l| l.split(',').take(5).map(str::to_owned).collect()).collect()
    };
    let first = rows(&a.join("sweep1"));
    assert_eq!(first, rows(&a.join("sweep2")));
    assert_eq!(first.len(), 3);
    let skips: Vec<f64> = first.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(skips.windows(2).all(|w| w[0] <= w[1]), "{skips:?}");

    let bench = a.join("bench");
    assert_eq!(
        run(&["bench", "--checkpoint", s(&ckpt), "--data", s(&a.join("data/eval")), "--calibration", s(&a.join("cal/calibration.json")), "--workers", "2", "--out", s(&bench)]),
        0
    );
    assert_eq!(read_json(&bench.join("bench.json"))["threshold"].as_f64(), Some(t_star));
}

#[test]
fn training_without_objectness_loss_still_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), 0.0);
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    assert_eq!(run(&["--config", &cfg, "synth", "--out", s(&data)]), 0);
    assert_eq!(run(&["--config", &cfg, "train", "--data", s(&data.join("train")), "--out", s(&out)]), 0);
    let bytes = fs::read(out.join("model.ckpt")).unwrap();
    assert_eq!(&bytes[..8], b"OANCKPT1");
    assert!(gated_detect::nn::Checkpoint::from_bytes(&bytes, &out).is_ok());
}
