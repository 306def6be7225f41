use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use kmerl::config::RunConfig;

fn kmerl<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmerl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("kmerl runs")
}

fn ok<S: AsRef<std::ffi::OsStr> + std::fmt::Debug>(args: &[S]) -> String {
    let out = kmerl(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// A config small enough for a few seconds per stage.
fn tiny_config(dir: &Path) -> String {
    let cfg = RunConfig::default()
        .with_overrides(&[
            "synthetic.num_records=16",
            "synthetic.num_valid=4",
            "synthetic.num_test=8",
            "synthetic.length=500",
            "model.shared_dim=16",
            "model.encoder.signal_length=500",
            "model.encoder.token_length=50",
            "model.encoder.embed_dim=16",
            "model.encoder.num_layers=1",
            "model.text.width=16",
            "model.text.num_layers=1",
            "model.query.num_layers=1",
            "pretrain.batch_size=4",
            "pretrain.max_steps=4",
            "eval.probe.epochs=2",
        ])
        .unwrap();
    let path = dir.join("tiny.json");
    cfg.save(&path).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_reports_and_sets_the_exit_code() {
    let out = ok(&["gradcheck"]);
    assert!(out.starts_with("PASS"), "{out}");
    let strict = kmerl(&["gradcheck", "--threshold", "1e-30"]);
    assert!(!strict.status.success());
    assert!(String::from_utf8_lossy(&strict.stdout).starts_with("FAIL"));
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let run_s = run.to_str().unwrap();
    let common = ["--config", cfg.as_str(), "--run", run_s];
    let with = |cmd: &[&'static str]| -> Vec<String> { common.iter().chain(cmd).map(|s| s.to_string()).collect() };

    ok(&with(&["synth"]));
    ok(&with(&["mine", "--client", "rule"]));
    ok(&with(&["pretrain", "--seed", "3"]));
    let zs: serde_json::Value = serde_json::from_str(&ok(&with(&["zeroshot"]))).unwrap();
    assert_eq!(zs["task"], "zero_shot");
    assert_eq!(zs["num_records"], 8);

    for f in [
        "config.json",
        "run.json",
        "data/manifest.json",
        "knowledge/vocab.json",
        "knowledge/labels.jsonl",
        "pretrain/metrics.jsonl",
        "pretrain/best.ckpt",
        "pretrain/final.ckpt",
        "eval/zeroshot.json",
        "eval/zeroshot.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("pretrain/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(record["command"], "zeroshot");
    let saved = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(record["config_hash"], saved.hash());

    ok(&with(&["leadsweep"]));
    let sweep = fs::read_to_string(run.join("eval/leadsweep_zeroshot.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 13);
    assert!(sweep.starts_with("k,macro_auc,macro_f1\n1,"));

    let three: serde_json::Value = serde_json::from_str(&ok(&with(&["zeroshot", "--leads", "3"]))).unwrap();
    assert_eq!(three["leads"], serde_json::json!(["I", "II", "III"]));
    assert!(run.join("eval/zeroshot_leads3.json").exists());

    let probe: serde_json::Value = serde_json::from_str(&ok(&with(&["linprobe", "--fraction", "1.0"]))).unwrap();
    assert_eq!(probe["fraction"], 1.0);
    assert!(run.join("eval/linprobe_1.json").exists());

    let su: serde_json::Value = serde_json::from_str(&ok(&with(&["seen-unseen"]))).unwrap();
    let classes = su["seen"].as_array().unwrap().len() + su["unseen"].as_array().unwrap().len();
    assert_eq!(classes, 4);
}

#[test]
fn ablate_emits_one_run_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let out = ok(&["--config", &cfg, "--run", run.to_str().unwrap(), "ablate", "--grid", "mask_ratio=0.25,0.5,0.75"]);
    assert_eq!(out.lines().count(), 3, "{out}");
    let mut points: Vec<String> =
        fs::read_dir(run.join("ablate")).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    points.sort();
    assert_eq!(points, ["mask_ratio=0.25", "mask_ratio=0.5", "mask_ratio=0.75"]);
    for p in &points {
        let saved = RunConfig::load(&run.join("ablate").join(p).join("config.json")).unwrap();
        assert_eq!(saved.pretrain.mask_ratio.to_string(), p.trim_start_matches("mask_ratio="));
        assert!(run.join("ablate").join(p).join("eval/zeroshot.json").exists());
    }
    assert_eq!(fs::read_to_string(run.join("eval/ablation.csv")).unwrap().lines().count(), 4);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("empty");
    for args in [
        vec!["--set", "pretrain.nope=1", "synth"],
        vec!["--set", "eval.leads=13", "synth"],
        vec!["zeroshot"],
        vec!["ablate", "--grid", "mask_ratio"],
    ] {
        let args = [&["--run", run.to_str().unwrap()][..], &args].concat();
        let out = kmerl(&args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(String::from_utf8_lossy(&out.stderr).contains("error"), "{args:?}");
    }
}
