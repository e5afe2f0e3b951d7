use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mdepth(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdepth"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

/// Writes `count` synthetic scenes under `dir/data` and returns the manifest.
fn synth(dir: &Path, count: usize, side: usize) -> PathBuf {
    let data = dir.join("data");
    let (c, n) = (count.to_string(), side.to_string());
    assert_ok(&mdepth(&["synth-data", "--out", s(&data), "--count", &c, "--height", &n, "--width", &n]));
    data.join("manifest.csv")
}

fn write_config(dir: &Path, name: &str, json: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, json).unwrap();
    p
}

fn metrics(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn training_is_reproducible_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4, 16);
    let cfg = write_config(tmp.path(), "c.json", r#"{"train.max_steps": 3, "train.batch_size": 2}"#);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = mdepth(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(out), "--seed", "4"]);
        assert_ok(&o);
        assert!(stdout(&o).contains("trained 3 steps"));
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "log.csv"), read(&b, "log.csv"));
    assert_eq!(read(&a, "final.ckpt"), read(&b, "final.ckpt"));
    let log = String::from_utf8(read(&a, "log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    // The echoed config reproduces itself when fed back in.
    let echoed: Value = serde_json::from_slice(&read(&a, "resolved_config.json")).unwrap();
    assert_eq!(echoed["train.max_steps"], 3);
    assert_eq!(echoed["train.seed"], 4);
    assert_eq!(echoed["network.seed"], 4);
    assert_eq!(echoed["network.preset"], "toy");
    let c = tmp.path().join("c");
    assert_ok(&mdepth(&["train", "--config", s(&a.join("resolved_config.json")), "--out", s(&c)]));
    assert_eq!(read(&a, "resolved_config.json"), read(&c, "resolved_config.json"));
    assert_eq!(read(&a, "log.csv"), read(&c, "log.csv"));
}

#[test]
fn resume_continues_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4, 16);
    let m = s(&manifest);
    let short = write_config(tmp.path(), "s.json", r#"{"train.max_steps": 2, "train.batch_size": 2}"#);
    let long = write_config(tmp.path(), "l.json", r#"{"train.max_steps": 5, "train.batch_size": 2}"#);
    let (full, part) = (tmp.path().join("full"), tmp.path().join("part"));
    assert_ok(&mdepth(&["train", "--config", s(&long), "--manifest", m, "--out", s(&full)]));
    assert_ok(&mdepth(&["train", "--config", s(&short), "--manifest", m, "--out", s(&part)]));
    let ckpt = part.join("final.ckpt");
    assert_ok(&mdepth(&["train", "--config", s(&long), "--manifest", m, "--out", s(&part), "--resume", s(&ckpt)]));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&full, "log.csv"), read(&part, "log.csv"));
    assert_eq!(read(&full, "final.ckpt"), read(&part, "final.ckpt"));
}

#[test]
fn missing_manifest_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere").join("manifest.csv");
    let o = mdepth(&["train", "--manifest", s(&missing), "--out", s(&tmp.path().join("o"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains(s(&missing)), "{}", stderr(&o));
}

#[test]
fn unknown_flags_and_config_keys_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(mdepth(&["info", "--bogus"]).status.code(), Some(1));
    let bad = write_config(tmp.path(), "bad.json", r#"{"train.learning_rat": 0.1}"#);
    let o = mdepth(&["info", "--config", s(&bad)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.learning_rat"));
}

#[test]
fn eval_identity_and_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 3, 16);
    let out = tmp.path().join("ev");
    let o = mdepth(&["eval", "--identity", "--manifest", s(&manifest), "--out", s(&out)]);
    assert_ok(&o);
    let m = metrics(&out);
    assert_eq!(m["rmse"], 0.0);
    assert_eq!(m["mae"], 0.0);
    assert_eq!(m["sq_rel"], 0.0);
    assert_eq!(m["n_images"], 3);
    let table = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(table.starts_with("Model") && table.contains("identity"));

    let empty = write_config(tmp.path(), "empty.csv", "");
    let o = mdepth(&["eval", "--identity", "--manifest", s(&empty), "--out", s(&out)]);
    assert!(!o.status.success());
}

#[test]
fn training_lowers_eval_rmse() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 8, 32);
    let m = s(&manifest);
    let untrained = write_config(tmp.path(), "u.json", r#"{"train.max_steps": 0}"#);
    let trained = write_config(
        tmp.path(),
        "t.json",
        r#"{"train.epochs": 100, "train.max_steps": 100, "train.batch_size": 8, "train.learning_rate": 0.001, "train.augment": false}"#,
    );
    let mut rmse = Vec::new();
    for (name, cfg) in [("u", &untrained), ("t", &trained)] {
        let run = tmp.path().join(name);
        assert_ok(&mdepth(&["train", "--config", s(cfg), "--manifest", m, "--out", s(&run)]));
        let ev = run.join("eval");
        assert_ok(&mdepth(&["eval", "--checkpoint", s(&run.join("final.ckpt")), "--manifest", m, "--out", s(&ev)]));
        rmse.push(metrics(&ev)["rmse"].as_f64().unwrap());
    }
    assert!(rmse[1] < rmse[0], "trained {} vs untrained {}", rmse[1], rmse[0]);
}

#[test]
fn predict_writes_half_resolution_maps() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 2, 16);
    let cfg = write_config(tmp.path(), "c.json", r#"{"train.max_steps": 1, "train.batch_size": 2}"#);
    let run = tmp.path().join("run");
    assert_ok(&mdepth(&["train", "--config", s(&cfg), "--manifest", s(&manifest), "--out", s(&run)]));
    let ckpt = run.join("final.ckpt");
    let image = manifest.parent().unwrap().join("rgb").join("00000.png");

    let mut outputs = Vec::new();
    for name in ["p1", "p2"] {
        let out = tmp.path().join(name);
        let o = mdepth(&["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&out)]);
        assert_ok(&o);
        assert!(stdout(&o).contains("min") && stdout(&o).contains("max"));
        let depth = image::open(out.join("00000_depth.png")).unwrap();
        let color = image::open(out.join("00000_color.png")).unwrap();
        assert_eq!((depth.width(), depth.height()), (8, 8));
        assert_eq!((color.width(), color.height()), (8, 8));
        assert!(depth.as_luma16().is_some() && color.as_rgb8().is_some());
        outputs.push((
            std::fs::read(out.join("00000_depth.png")).unwrap(),
            std::fs::read(out.join("00000_color.png")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);

    let odd = tmp.path().join("odd.png");
    image::RgbImage::new(18, 16).save(&odd).unwrap();
    let o = mdepth(&["predict", "--checkpoint", s(&ckpt), "--image", s(&odd), "--out", s(&tmp.path().join("p3"))]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("multiple of 4"), "{}", stderr(&o));
}

#[test]
fn gradcheck_reports_every_op_and_catches_corruption() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gc");
    let o = mdepth(&["gradcheck", "--instances", "3", "--out", s(&out)]);
    assert_ok(&o);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    let names: Vec<&str> = report["ops"].as_array().unwrap().iter().map(|o| o["op"].as_str().unwrap()).collect();
    assert_eq!(names, mdepth::gradcheck::OPS.to_vec());

    let o = mdepth(&["gradcheck", "--instances", "3", "--corrupt", "conv2d"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("conv2d"), "{}", stderr(&o));

    let o = mdepth(&["gradcheck", "--preset", "densenet121"]);
    assert_eq!(o.status.code(), Some(1));
}

fn info_numbers(text: &str, label: &str) -> usize {
    text.lines()
        .find_map(|l| l.strip_prefix(label))
        .unwrap_or_else(|| panic!("no '{label}' line"))
        .trim()
        .parse()
        .unwrap()
}

#[test]
fn info_table_is_consistent() {
    let o = mdepth(&["info"]);
    assert_ok(&o);
    let text = stdout(&o);
    let tensors = info_numbers(&text, "parameter tensors:");
    let total = info_numbers(&text, "total parameters:");
    let rows: Vec<&str> = text.lines().skip(1).take(tensors).collect();
    let sum: usize = rows
        .iter()
        .map(|r| r.split_whitespace().last().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(sum, total);
    assert_eq!(total, 6241);

    let o = mdepth(&["info", "--preset", "densenet121"]);
    assert_ok(&o);
    let text = stdout(&o);
    assert!(text.contains("\"8 million total parameters\""));
    assert_eq!(info_numbers(&text, "total parameters:"), 10_622_561);
}
