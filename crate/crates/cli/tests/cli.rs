use std::path::Path;
use std::process::{Command, Output};

use geofm::trainer::ModelConfig;
use serde_json::{json, Value};

fn geofm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geofm")).args(args).output().expect("spawn geofm")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn micro_config(dir: &Path) -> String {
    let cfg = json!({
        "dataset": { "count": 8, "ms_frames": 3, "sar_frames": 2 },
        "model": ModelConfig::micro(),
        "train": { "batch_size": 2, "aug": { "n_local": 2, "ms_frames": 2, "sar_frames": 2 } },
        "eval": { "k": 3, "attn_local_views": 1 },
    });
    let path = dir.join("micro.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_owned()
}

/// Every schema property appears in the serialized defaults with the same
/// default, and vice versa.
fn check_schema(schema: &Value, value: &Value, path: &str) {
    match value {
        Value::Object(map) => {
            assert_eq!(schema["type"], "object", "{path}");
            assert_eq!(schema["additionalProperties"], false, "{path}");
            let props = schema["properties"].as_object().unwrap_or_else(|| panic!("{path} has no properties"));
            let mut a: Vec<_> = props.keys().collect();
            let mut b: Vec<_> = map.keys().collect();
            a.sort();
            b.sort();
            assert_eq!(a, b, "keys of {path}");
            for (k, v) in map {
                check_schema(&props[k], v, &format!("{path}.{k}"));
            }
        }
        other => {
            assert_eq!(&schema["default"], other, "default of {path}");
            let ty = schema["type"].as_str().unwrap();
            let ok = match other {
                Value::Bool(_) => ty == "boolean",
                Value::Number(n) if n.is_u64() => ty == "integer" || ty == "number",
                Value::Number(_) => ty == "number",
                Value::String(_) => ty == "string",
                Value::Array(_) => ty == "array",
                _ => false,
            };
            assert!(ok, "{path}: schema type {ty} vs {other}");
        }
    }
}

#[test]
fn schema_matches_defaults() {
    let defaults = stdout_json(&geofm(&["show-config"]));
    let schema = stdout_json(&geofm(&["show-config", "--schema"]));
    check_schema(&schema, &defaults, "");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.mmds");
    let data = data.to_str().unwrap();
    assert_eq!(geofm(&["gen-data", "--count", "0", "--out", data]).status.code(), Some(2));
    assert_eq!(geofm(&["gen-data", "--bogus"]).status.code(), Some(2));
    assert_eq!(geofm(&[]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lr": 1}}"#).unwrap();
    assert_eq!(geofm(&["--config", bad.to_str().unwrap(), "show-config"]).status.code(), Some(3));
    std::fs::write(&bad, r#"{"model": {"num_classes": 5}}"#).unwrap();
    assert_eq!(geofm(&["--config", bad.to_str().unwrap(), "gen-data", "--out", data]).status.code(), Some(3));

    let missing = dir.path().join("missing.mmds");
    let out = geofm(&["pretrain", "--data", missing.to_str().unwrap(), "--iters", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mmds"));
    assert_eq!(geofm(&["pretrain", "--data", data, "--preset", "apm-ablation:1/3"]).status.code(), Some(2));
    assert_eq!(geofm(&["eval-knn", "--checkpoint", "x", "--train", "y", "--test", "z", "--branch", "both"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let run = |name: &str, seed: &str| {
        let p = dir.path().join(name);
        let out = geofm(&["--config", &cfg, "--seed", seed, "--quiet", "gen-data", "--count", "3", "--out", p.to_str().unwrap()]);
        assert!(out.stderr.is_empty());
        let v = stdout_json(&out);
        assert_eq!(v["count"], 3);
        (std::fs::read(&p).unwrap(), v["sha256"].as_str().unwrap().to_owned())
    };
    let (a, ha) = run("a.mmds", "1");
    let (b, hb) = run("b.mmds", "1");
    let (c, hc) = run("c.mmds", "2");
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_ne!(a, c);
    assert_ne!(ha, hc);
}

#[test]
fn pretrain_eval_export_dump() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let cfg = micro_config(dir.path());
    let c = cfg.as_str();
    stdout_json(&geofm(&["--config", c, "--quiet", "gen-data", "--out", &p("train.mmds")]));
    stdout_json(&geofm(&["--config", c, "--seed", "9", "--quiet", "gen-data", "--count", "4", "--out", &p("test.mmds")]));

    let v = stdout_json(&geofm(&[
        "--config", c, "--quiet", "pretrain", "--data", &p("train.mmds"), "--iters", "2",
        "--metrics", &p("m.jsonl"), "--preset", "apm-ablation:1/2", "--out", &p("a.ckpt"),
    ]));
    assert_eq!(v["iters"], 2);
    assert_eq!(v["apm"]["hr"], json!([true, false, false]));
    assert_eq!(v["hr_grid_at_512"], json!([64, 64]));
    let metrics = std::fs::read_to_string(p("m.jsonl")).unwrap();
    let rows: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["iter"], 0);
    assert!(rows.iter().all(|r| r["loss"].as_f64().unwrap().is_finite()));
    let init = stdout_json(&geofm(&["--config", c, "--quiet", "pretrain", "--data", &p("train.mmds"), "--iters", "0", "--out", &p("init.ckpt")]));
    assert_eq!(init["iters"], 0);

    // The checkpoint carries its model config; eval uses it regardless of --config.
    let report = stdout_json(&geofm(&[
        "--quiet", "eval-knn", "--checkpoint", &p("a.ckpt"), "--train", &p("train.mmds"), "--test", &p("test.mmds"), "--k", "3",
    ]));
    assert_eq!(report["protocol"], "knn-cosine");
    assert_eq!(report["k"], 3);
    assert_eq!(report["branch"], "teacher");
    assert_eq!(report["source"], "fused");
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["per_class_accuracy"].as_array().unwrap().len(), 4);
    let student = stdout_json(&geofm(&[
        "--quiet", "eval-knn", "--checkpoint", &p("a.ckpt"), "--train", &p("train.mmds"), "--test", &p("test.mmds"),
        "--k", "3", "--branch", "student", "--source", "backbone",
    ]));
    assert_eq!((student["branch"].as_str(), student["source"].as_str()), (Some("student"), Some("backbone")));
    let too_many = geofm(&["eval-knn", "--checkpoint", &p("a.ckpt"), "--train", &p("test.mmds"), "--test", &p("test.mmds"), "--k", "5"]);
    assert_eq!(too_many.status.code(), Some(2));

    let out = geofm(&["--quiet", "export-features", "--checkpoint", &p("a.ckpt"), "--data", &p("test.mmds")]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let d = ModelConfig::micro().backbone.out_dim();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + d);
    assert_eq!((header[0], header[1], header[2 + d - 1]), ("id", "label", format!("f{}", d - 1).as_str()));
    assert_eq!(csv.lines().count(), 5);

    let v = stdout_json(&geofm(&[
        "--config", c, "--quiet", "dump-attn", "--checkpoint", &p("a.ckpt"), "--data", &p("test.mmds"), "--index", "1",
        "--out", &p("attn"),
    ]));
    let views = v["views"].as_array().unwrap();
    assert_eq!(views.len(), 3);
    for view in views {
        assert_eq!(view["queries"], 2);
        assert!(view["max_row_sum_error"].as_f64().unwrap() < 1e-6);
        let name = view["view"].as_str().unwrap();
        assert!(dir.path().join("attn").join(format!("{name}.npy")).exists());
        assert!(dir.path().join("attn").join(format!("{name}_q01.png")).exists());
    }
    let out = geofm(&["dump-attn", "--checkpoint", &p("a.ckpt"), "--data", &p("test.mmds"), "--index", "4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn resume_continues_the_iteration_count() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_owned();
    let cfg = micro_config(dir.path());
    let c = cfg.as_str();
    stdout_json(&geofm(&["--config", c, "--quiet", "gen-data", "--count", "4", "--out", &p("d.mmds")]));
    stdout_json(&geofm(&["--config", c, "--quiet", "pretrain", "--data", &p("d.mmds"), "--iters", "1", "--out", &p("one.ckpt")]));
    let v = stdout_json(&geofm(&[
        "--config", c, "--quiet", "pretrain", "--data", &p("d.mmds"), "--iters", "2", "--resume", &p("one.ckpt"), "--out", &p("two.ckpt"),
    ]));
    assert_eq!(v["iters"], 2);
    let out = geofm(&["--quiet", "pretrain", "--data", &p("d.mmds"), "--iters", "2", "--resume", &p("one.ckpt")]);
    assert_eq!(out.status.code(), Some(3), "default model config differs from the micro checkpoint");
}
