use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn toolplan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_toolplan"))
        .current_dir(dir)
        .env_remove("ENGINE_CONFIG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = toolplan(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn err_json(o: &Output) -> Value {
    assert!(!o.status.success());
    serde_json::from_slice(&o.stderr).expect("stderr is one JSON object")
}

/// A small catalog keeps the slower commands quick.
fn small_catalog(dir: &Path) {
    fs::write(
        dir.join("small.toml"),
        "[catalog]\nsamples_per_task = 3\n[catalog.counts]\nimage_to_image = 20\nimage_to_text = 10\n\
         text_to_image = 10\ntext_to_text = 20\nimage_text_to_text = 10\ntext_text_to_text = 10\n\
         [train]\nepochs = 5\n[supervised]\nepochs = 10\n",
    )
    .unwrap();
    ok(dir, &["gen", "--config", "small.toml", "--out", "run"]);
}

#[test]
fn gen_writes_catalog_samples_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--out", "a"]);
    let cat: Vec<Value> = serde_json::from_str(&fs::read_to_string(d.path().join("a/catalog.json")).unwrap()).unwrap();
    assert_eq!(cat.len(), 185);
    assert!(d.path().join("a/samples/t000.json").exists());
    let m: Value = serde_json::from_str(&fs::read_to_string(d.path().join("a/catalog.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["catalog"], 7);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);

    ok(d.path(), &["gen", "--out", "b"]);
    assert_eq!(
        fs::read(d.path().join("a/catalog.json")).unwrap(),
        fs::read(d.path().join("b/catalog.json")).unwrap()
    );
    ok(d.path(), &["gen", "--seed", "3", "--out", "c"]);
    assert_ne!(
        fs::read(d.path().join("a/catalog.json")).unwrap(),
        fs::read(d.path().join("c/catalog.json")).unwrap()
    );
}

#[test]
fn config_errors_carry_field_paths() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("bad.toml"), "[decoder]\nbeam = 4\n").unwrap();
    let e = err_json(&toolplan(d.path(), &["gen", "--config", "bad.toml"]));
    assert_eq!(e["error"], "schema");
    assert!(e["field"].as_str().unwrap().starts_with("decoder"), "{e}");

    fs::write(d.path().join("range.toml"), "[sim]\nbeta = 3.0\n").unwrap();
    let e = err_json(&toolplan(d.path(), &["gen", "--config", "range.toml"]));
    assert_eq!(e["error"], "config");
    assert_eq!(e["field"], "sim");
}

#[test]
fn env_var_supplies_config() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.json"), r#"{"catalog":{"seed":11}}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_toolplan"))
        .current_dir(d.path())
        .env("ENGINE_CONFIG", "c.json")
        .args(["gen", "--out", "x"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let m: Value = serde_json::from_str(&fs::read_to_string(d.path().join("x/catalog.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"]["catalog"], 11);
}

#[test]
fn plan_then_exec_and_invalid_plan_rejected() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["gen", "--out", "run"]);
    let plan = ok(d.path(), &["plan", "--catalog", "run/catalog.json", "--task", "t000"]);
    fs::write(d.path().join("p.json"), &plan).unwrap();
    let res: Value = serde_json::from_str(&ok(
        d.path(),
        &["exec", "--catalog", "run/catalog.json", "--task", "t000", "--plan", "p.json"],
    ))
    .unwrap();
    let score = res["score"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&score));
    assert_eq!(res["records"].as_array().unwrap().len(), 20);

    // an image-to-image plan cannot serve the two-input tasks at the end of the catalog
    let o = toolplan(
        d.path(),
        &["exec", "--catalog", "run/catalog.json", "--task", "t184", "--plan", "p.json"],
    );
    let e = err_json(&o);
    assert_eq!(e["error"], "invalid_plan");
    assert!(!e["violations"].as_array().unwrap().is_empty());

    let e = err_json(&toolplan(d.path(), &["plan", "--catalog", "run/catalog.json", "--task", "nope"]));
    assert_eq!(e["error"], "unknown_task");
    let e = err_json(&toolplan(d.path(), &["plan", "--task", "t000"]));
    assert_eq!(e["error"], "usage");
}

#[test]
fn parse_reads_file() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("t.txt"),
        "Step one: Image Denoising. Then run the Frobnicator and finish with Image Super Resolution.",
    )
    .unwrap();
    let v: Value = serde_json::from_str(&ok(d.path(), &["parse", "--text", "t.txt"])).unwrap();
    assert_eq!(v["tools"], serde_json::json!(["Image Denoising", "Image Super Resolution"]));
    assert_eq!(v["plan"]["nodes"].as_array().unwrap().len(), 2);
    assert_eq!(v["dropped"][0]["span"], "Frobnicator");
}

#[test]
fn train_eval_is_idempotent() {
    let d = tempfile::tempdir().unwrap();
    small_catalog(d.path());
    let cfg = ["--config", "small.toml", "--catalog", "run/catalog.json", "--out", "run"];
    let before = fs::read(d.path().join("run/catalog.json")).unwrap();
    ok(d.path(), &[&["train", "--schema", "rltf"][..], &cfg].concat());
    let hist = fs::read_to_string(d.path().join("run/history.csv")).unwrap();
    assert!(hist.starts_with("epoch,mean_reward,baseline,epsilon\n"));
    assert_eq!(hist.lines().count(), 6);
    let ck: Value = serde_json::from_str(&fs::read_to_string(d.path().join("run/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(ck["schema"], "RLTF");
    assert!(ck["manifest"]["inputs"]["catalog"].is_string());

    let eval = [&["eval", "--checkpoint", "run/checkpoint.json", "--split", "test"][..], &cfg].concat();
    ok(d.path(), &eval);
    let first = fs::read(d.path().join("run/report.csv")).unwrap();
    ok(d.path(), &eval);
    assert_eq!(first, fs::read(d.path().join("run/report.csv")).unwrap());
    assert!(String::from_utf8(first).unwrap().starts_with("metric,RLTF\nCLIP,"));
    let rep: Value = serde_json::from_str(&fs::read_to_string(d.path().join("run/report.json")).unwrap()).unwrap();
    assert!(rep["manifest"]["config_hash"].is_string());
    assert!(rep["schemas"]["RLTF"]["overall"].is_number());
    assert_eq!(before, fs::read(d.path().join("run/catalog.json")).unwrap());

    ok(d.path(), &[&["oracle", "--split", "train", "--max-depth", "3"][..], &cfg].concat());
    let oracle = fs::read_to_string(d.path().join("run/oracle.csv")).unwrap();
    assert!(oracle.starts_with("task_id,category,reward,tools,plans_examined,plan\n"));
}

#[test]
fn checkpoint_must_match_registry() {
    let d = tempfile::tempdir().unwrap();
    small_catalog(d.path());
    ok(
        d.path(),
        &[
            "train",
            "--schema",
            "supervised",
            "--config",
            "small.toml",
            "--catalog",
            "run/catalog.json",
            "--out",
            "run",
        ],
    );
    let path = d.path().join("run/checkpoint.json");
    let mut ck: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(ck["schema"], "Supervised");
    ck["manifest"]["registry_hash"] = Value::String("0".repeat(64));
    fs::write(&path, ck.to_string()).unwrap();
    let e = err_json(&toolplan(
        d.path(),
        &["eval", "--catalog", "run/catalog.json", "--checkpoint", "run/checkpoint.json"],
    ));
    assert_eq!(e["error"], "registry_mismatch");
}

#[test]
fn compare_writes_all_columns() {
    let d = tempfile::tempdir().unwrap();
    small_catalog(d.path());
    ok(
        d.path(),
        &["compare", "--config", "small.toml", "--catalog", "run/catalog.json", "--out", "cmp"],
    );
    let csv = fs::read_to_string(d.path().join("cmp/report.csv")).unwrap();
    assert!(csv.starts_with("metric,Zero,Few,Supervised,RLTF\n"));
    assert!(csv.contains(",N/A,"));
    assert!(d.path().join("cmp/history.csv").exists());
    assert!(d.path().join("cmp/checkpoint.json").exists());
}
