use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::tempdir;

const TINY: &str = r#"{
  "model": {"stage_channels": [8, 8, 16, 16], "fpn_channels": 8, "ppm_bins": [1], "norm_groups": 4},
  "train": {"batch_size": 2, "crop_size": 32, "eval_interval": 2},
  "ablation": {"seeds": [0], "kernels": [1, 3], "kernel_iters": 2}
}"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowalign"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn setup(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = dir.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data");
    let out = run(&["gen-data", "--n", "8", "--size", "32", "--out", p(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (cfg, data)
}

#[test]
fn gradcheck_sampler_passes() {
    let out = run(&["gradcheck", "--scope", "sampler", "--seeds", "3"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().last().unwrap().starts_with("gradcheck PASS"), "{text}");
}

#[test]
fn unknown_config_keys_exit_with_code_2() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}, "modle": {}}"#).unwrap();
    let out = run(&["train", "--config", p(&cfg), "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_json(&out);
    assert_eq!(err["error"], "config");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("train.learning_rate") && msg.contains("modle"), "{msg}");
}

#[test]
fn missing_dataset_exits_with_code_4() {
    let dir = tempdir().unwrap();
    let out = run(&["train", "--data", p(&dir.path().join("nope")), "--out", p(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_json(&out)["error"], "io");
}

#[test]
fn zero_iteration_models_predict_alike_with_and_without_alignment() {
    let dir = tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let (fam, plain) = (dir.path().join("fam"), dir.path().join("plain"));
    for (out, extra) in [(&fam, None), (&plain, Some("--no-fam"))] {
        let mut args = vec!["train", "--config", p(&cfg), "--data", p(&data), "--out", p(out), "--iters", "0"];
        args.extend(extra);
        let r = run(&args);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert!(out.join("config.json").is_file() && out.join("config.input.json").is_file());
    }
    let image = data.join("images").join("00000.ppm");
    let label = data.join("labels").join("00000.pgm");
    let mut reports = Vec::new();
    for run_dir in [&fam, &plain] {
        let ckpt = run_dir.join("best.ckpt");
        let r = run(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        let v: Value = serde_json::from_slice(&r.stdout).unwrap();
        reports.push((v["miou"].clone(), v["pixel_accuracy"].clone()));
        let viz = run_dir.join("viz");
        let r = run(&[
            "viz", "--checkpoint", p(&ckpt), "--image", p(&image), "--label", p(&label), "--out-dir", p(&viz),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    assert_eq!(reports[0], reports[1]);
    let pred = |d: &Path| fs::read(d.join("viz").join("prediction.ppm")).unwrap();
    assert_eq!(pred(&fam), pred(&plain));
    // Zero flows render white.
    let color = fs::read(fam.join("viz").join("flow_dec.fam2_color.ppm")).unwrap();
    assert!(color[color.len() - 32 * 32 * 3..].iter().all(|&b| b == 255));
    assert!(plain.join("viz").join("error.ppm").is_file());
    assert!(!plain.join("viz").join("flow_dec.fam2_color.ppm").exists());
}

#[test]
fn train_writes_log_checkpoints_and_effective_config() {
    let dir = tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let out = dir.path().join("run");
    let r = run(&[
        "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--iters", "3", "--fam-k", "5", "--seed", "7",
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let eff: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(eff["model"]["fam"]["kernel"], 5);
    assert_eq!(eff["train"]["seed"], 7);
    assert_eq!(eff["train"]["total_iters"], 3);
    assert_eq!(fs::read_to_string(out.join("config.input.json")).unwrap(), TINY);
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(out.join("last.ckpt").is_file() && out.join("best.ckpt").is_file());

    let r = run(&["bench", "--checkpoint", p(&out.join("last.ckpt")), "--shape", "1x3x32x32", "--runs", "3"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let v: Value = serde_json::from_slice(&r.stdout).unwrap();
    assert!(v["bench"]["mean_ms"].as_f64().unwrap() > 0.0);
    assert!(v["bench"]["environment"]["target_arch"].is_string());
}

#[test]
fn bad_shape_is_a_config_error() {
    let out = run(&["bench", "--shape", "1x3x30x32", "--runs", "3"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablate_emits_rows_and_table() {
    let dir = tempdir().unwrap();
    let (cfg, data) = setup(dir.path());
    let out = dir.path().join("abl");
    let r = run(&["ablate", "--config", p(&cfg), "--data", p(&data), "--out", p(&out), "--iters", "2"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows: Vec<Value> = fs::read_to_string(out.join("ablation.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows.iter().filter(|r| r["grid"] == "kernel").count(), 2);
    let variants: Vec<&str> = rows[..4].iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["FPN-bilinear", "FPN+FAM", "FPN+PPM", "FPN+FAM+PPM"]);
    let table = fs::read_to_string(out.join("ablation.md")).unwrap();
    assert!(table.contains("| kernel | k=3 |"));
    assert!(out.join("decoder/FPN+FAM/seed0/train_log.jsonl").is_file());
}
