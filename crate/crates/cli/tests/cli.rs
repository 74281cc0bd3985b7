use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rpeflow::objectives::METRIC_COLUMNS;
use rpeflow::train::read_log;
use rpeflow::viz::Image;
use rpeflow_cli::{train_config, Cli, Command as Cmd};
use clap::Parser;

fn rpeflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpeflow")).args(args).output().unwrap()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn gen(dir: &Path, count: &str, seed: &str) {
    let out = rpeflow(&["gen", "--count", count, "--out", &s(dir), "--seed", seed]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--tiny", "--log-every", "0"];
    args.extend_from_slice(extra);
    rpeflow(&args)
}

#[test]
fn gen_writes_manifest_and_rejects_zero_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = rpeflow(&["gen", "--count", "8", "--out", &s(&dir.path().join("d")), "--seed", "7"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("8 samples") && stdout.contains("6 train, 2 val"), "{stdout}");
    assert!(dir.path().join("d/manifest.json").exists());

    let bad = rpeflow(&["gen", "--count", "0", "--out", &s(&dir.path().join("e"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(!dir.path().join("e").exists());
}

#[test]
fn eval_ground_truth_reports_the_six_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "4", "1");
    let out = rpeflow(&["eval", "--data", &s(&data), "--gt", "--split", "train", "--out", &s(&dir.path().join("e"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/metrics.json")).unwrap()).unwrap();
    let obj = json.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(|k| k.as_str()).collect();
    let mut cols = METRIC_COLUMNS.to_vec();
    keys.sort();
    cols.sort();
    assert_eq!(keys, cols);
    let table = fs::read_to_string(dir.path().join("e/metrics.txt")).unwrap();
    assert_eq!(table, String::from_utf8_lossy(&out.stdout));
    let lines: Vec<&str> = table.lines().collect();
    let head: Vec<&str> = lines[0].split_whitespace().collect();
    for (c, v) in head.iter().zip(lines[1].split_whitespace()) {
        let printed: f64 = v.parse().unwrap();
        assert!((printed - obj[*c].as_f64().unwrap()).abs() <= 5e-5, "{c}");
        let expect = if c.starts_with("EPE") { 0.0 } else { 1.0 };
        assert_eq!(printed, expect, "{c}");
    }
}

#[test]
fn gradcheck_reports_failures_cleanly_and_is_deterministic() {
    let a = rpeflow(&["gradcheck", "--seed", "4"]);
    let b = rpeflow(&["gradcheck", "--seed", "4"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    let out = String::from_utf8_lossy(&a.stdout);
    for suite in ["tensor-core", "geometry", "fusion", "mireg", "network"] {
        assert!(out.contains(&format!("suite {suite}")), "{suite}");
    }

    let strict = rpeflow(&["gradcheck", "--tol", "1e-12"]);
    assert_eq!(strict.status.code(), Some(1));
    let err = String::from_utf8_lossy(&strict.stderr);
    assert!(err.contains("gradcheck failed") && err.contains("tensor-core/matmul"), "{err}");
    assert!(!err.contains("panicked"));
}

#[test]
fn ablation_flags_compose() {
    let cli = Cli::parse_from([
        "rpeflow", "train", "--data", "d", "--out", "o", "--tiny", "--no-event", "--no-mi", "--concat-fusion",
    ]);
    let Cmd::Train(args) = cli.command else { panic!("not train") };
    let cfg = train_config(&args).unwrap();
    assert!(cfg.train.no_event);
    assert!(cfg.model.concat_fusion);
    assert_eq!(cfg.train.loss.beta, 0.0);
    assert_eq!(cfg.train.optimizer.lr, 1e-3);
    assert_eq!(cfg.train.optimizer.weight_decay, 1e-6);
}

#[test]
fn config_file_with_unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"train": {"iterations": 3, "learning_rate": 0.1}}"#).unwrap();
    let out = train(dir.path(), &dir.path().join("o"), &["--config", &s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn no_mi_logs_feature_loss_without_adding_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "4", "2");
    let run = dir.path().join("r");
    let out = train(&data, &run, &["--iterations", "3", "--batch-size", "2", "--no-mi"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = read_log(&run.join("train_log.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r.loss, r.task);
        assert!(r.feat > 0.0);
    }
    let header = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(header.starts_with("iter,L,L_task,L_feat,EPE2D_train\n"));
    assert!(run.join("final/manifest.json").exists() && run.join("best/manifest.json").exists());
}

#[test]
fn resume_matches_an_uninterrupted_run_at_f64() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "5", "3");
    let common = ["--f64", "--batch-size", "2", "--seed", "5"];
    let straight = dir.path().join("a");
    let mut args = common.to_vec();
    args.extend(["--iterations", "4"]);
    assert!(train(&data, &straight, &args).status.success());

    let split = dir.path().join("b");
    let mut args = common.to_vec();
    args.extend(["--iterations", "2"]);
    assert!(train(&data, &split, &args).status.success());
    let resume = s(&split.join("final"));
    let out = train(&data, &split, &["--f64", "--resume", &resume, "--iterations", "4"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    assert_eq!(
        fs::read(straight.join("train_log.csv")).unwrap(),
        fs::read(split.join("train_log.csv")).unwrap()
    );
    for f in ["weights.bin", "manifest.json", "optimizer/weights.bin"] {
        assert_eq!(fs::read(straight.join("final").join(f)).unwrap(), fs::read(split.join("final").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn viz_writes_valid_images_and_rejects_missing_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "4", "4");
    let run = dir.path().join("r");
    assert!(train(&data, &run, &["--iterations", "1", "--batch-size", "1"]).status.success());
    let out_dir = dir.path().join("v");
    let out = rpeflow(&[
        "viz", "--data", &s(&data), "--split", "train", "--index", "2", "--out", &s(&out_dir), "--checkpoint",
        &s(&run.join("final")), "--max-flow", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["flow_gt.ppm", "flow_pred.ppm", "events.ppm", "sf_error.ppm"] {
        let img = Image::from_ppm(&fs::read(out_dir.join(name)).unwrap()).unwrap();
        assert_eq!((img.width, img.height), (32, 32), "{name}");
    }

    let missing = rpeflow(&["viz", "--data", &s(&dir.path().join("nowhere")), "--out", &s(&out_dir)]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));
    let no_data = rpeflow(&["viz", "--out", &s(&out_dir)]);
    assert_eq!(no_data.status.code(), Some(2));
}

#[test]
fn eval_rejects_a_checkpoint_for_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    gen(&data, "4", "6");
    let run = dir.path().join("r");
    assert!(train(&data, &run, &["--iterations", "1", "--batch-size", "1"]).status.success());
    let manifest = run.join("final/manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replace("\"concat_fusion\": false", "\"concat_fusion\": true");
    fs::write(&manifest, text).unwrap();
    let out = rpeflow(&["eval", "--data", &s(&data), "--checkpoint", &s(&run.join("final"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("contract"), "{}", String::from_utf8_lossy(&out.stderr));
}
