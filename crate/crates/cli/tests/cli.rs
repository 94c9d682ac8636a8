use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn zsad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zsad")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = zsad(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path) {
    ok(&["gen-synth", "--out", p(dir), "--categories", "2", "--samples", "8", "--grid", "4x4", "--seed", "5"]);
}

#[test]
fn gen_synth_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-synth", "--out", p(d), "--categories", "2", "--samples", "4", "--grid", "4x4", "--seed", "7"]);
    }
    assert_eq!(fs::read(a.join("manifest.json")).unwrap(), fs::read(b.join("manifest.json")).unwrap());
    let m: Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    for cat in m["categories"].as_array().unwrap() {
        for rel in cat["train"].as_array().unwrap().iter().chain(cat["test"].as_array().unwrap()) {
            let rel = rel.as_str().unwrap();
            assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
        }
    }
}

#[test]
fn grad_check_passes_and_tight_tolerance_fails() {
    let out = ok(&["grad-check", "--seed", "3"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for m in ["hsvs", "vcpg", "vtam", "objective"] {
        assert!(text.lines().any(|l| l.starts_with(m) && l.ends_with("ok")), "{text}");
    }
    assert_eq!(zsad(&["grad-check", "--tol", "1e-12"]).status.code(), Some(4));
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(zsad(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(zsad(&["gen-synth", "--out", p(tmp.path()), "--grid", "4by4"]).status.code(), Some(2));

    let data = tmp.path().join("d");
    small_data(&data);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"gamma": 1.5}"#).unwrap();
    let ck = tmp.path().join("m.ckpt");
    assert_eq!(zsad(&["train", "--data", p(&data), "--out", p(&ck), "--config", p(&cfg)]).status.code(), Some(2));
    fs::write(&cfg, r#"{"not_a_field": 1}"#).unwrap();
    assert_eq!(zsad(&["train", "--data", p(&data), "--out", p(&ck), "--config", p(&cfg)]).status.code(), Some(2));

    let missing = tmp.path().join("missing");
    assert_eq!(zsad(&["train", "--data", p(&missing), "--out", p(&ck)]).status.code(), Some(3));

    let bundle = data.join("cat0/test/0000.bundle");
    let bytes = fs::read(&bundle).unwrap();
    let cut = tmp.path().join("cut.bundle");
    fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    ok(&["train", "--data", p(&data), "--out", p(&ck), "--epochs", "1"]);
    let out = zsad(&["infer", "--ckpt", p(&ck), "--bundle", p(&cut)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated"));
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data);
    let ck = tmp.path().join("m.ckpt");
    let out = ok(&["train", "--data", p(&data), "--exclude", "cat1", "--out", p(&ck), "--epochs", "2", "--seed", "4"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("resolved config"));

    let history = fs::read_to_string(tmp.path().join("m.history.jsonl")).unwrap();
    let rows: Vec<Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let f = |k: &str| r[k].as_f64().unwrap();
        let want = f("seg") + f("cls") + f("vae") * 1.0 + f("reg") * 0.5;
        assert!((f("total") - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    let report = tmp.path().join("r.json");
    let heat = tmp.path().join("heat");
    ok(&["eval", "--data", p(&data), "--only", "cat1", "--ckpt", p(&ck), "--report", p(&report), "--heatmaps", p(&heat)]);
    let text = fs::read_to_string(&report).unwrap();
    let r: Value = serde_json::from_str(&text).unwrap();
    for k in ["image", "pixel", "diagnostics", "counts", "per_category", "meta"] {
        assert!(r.get(k).is_some(), "missing {k}");
    }
    assert_eq!(r["counts"]["images"], 8);
    assert_eq!(r["meta"]["train_config"]["exclude_categories"][0], "cat1");
    assert_eq!(r["meta"]["pro_thresholds"], 200);
    let auroc = text.lines().find(|l| l.contains("\"auroc\"")).unwrap();
    let digits = auroc.trim().trim_end_matches(',').rsplit('.').next().unwrap();
    assert_eq!(digits.len(), 6, "{auroc}");
    assert_eq!(fs::read_dir(&heat).unwrap().count(), 8);
    let pgm = fs::read(heat.join("cat1_test_0000.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
    assert_eq!(pgm.len(), b"P5\n4 4\n255\n".len() + 16);

    let bundle = data.join("cat1/test/0003.bundle");
    let map = tmp.path().join("one.pgm");
    let a = ok(&["infer", "--ckpt", p(&ck), "--bundle", p(&bundle), "--heatmap", p(&map)]);
    let b = ok(&["infer", "--ckpt", p(&ck), "--bundle", p(&bundle)]);
    assert_eq!(a.stdout, b.stdout);
    let s: f64 = String::from_utf8_lossy(&a.stdout).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&s));
    assert_eq!(String::from_utf8_lossy(&a.stdout).trim().split('.').nth(1).unwrap().len(), 6);
    assert!(map.exists());
}

#[test]
fn sweep_writes_csv_and_json() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("d");
    small_data(&data);
    let csv = tmp.path().join("s.csv");
    ok(&["sweep", "--data", p(&data), "--exclude", "cat1", "--param", "gamma", "--values", "0.25,0.75", "--epochs", "1", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("param,value,image_auroc"));
    assert!(lines[1].starts_with("gamma,0.25,"));

    let json = tmp.path().join("s.json");
    ok(&["sweep", "--data", p(&data), "--exclude", "cat1", "--param", "xi", "--values", "0.5", "--epochs", "1", "--out", p(&json)]);
    let rows: Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["param"], "xi");
}
