use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chebmixer")).args(args).output().unwrap()
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("no stdout")).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_data(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let o = run(&[
        "gen-synth", "--nodes", "40", "--blocks", "2", "--p-in", "0.3", "--p-out", "0.05", "--feat-dim", "4", "--seed", "2",
        "--out", p(&data),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    data
}

/// Short training run on a 40-node synthetic graph.
fn quick_train(data: &Path, out: &Path) -> Output {
    run(&[
        "train",
        "--data",
        p(data),
        "--out",
        p(out),
        "--seed",
        "3",
        "--set",
        "max_epochs=5",
        "--set",
        "d=8",
        "--set",
        "d_s=4",
        "--set",
        "d_c=4",
    ])
}

#[test]
fn no_subcommand_is_a_usage_error() {
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn train_without_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train", "--data", p(&fixture("p3")), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "train",
        "--data",
        p(&fixture("p3")),
        "--out",
        p(dir.path()),
        "--seed",
        "1",
        "--set",
        "hiddn=8",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiddn"), "{}", stderr(&o));
}

#[test]
fn unknown_key_in_config_file_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nk = 3\nbogus = 1\n").unwrap();
    let o = run(&["train", "--config", p(&cfg), "--data", p(&fixture("p3")), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains(":3"), "{err}");
}

#[test]
fn train_then_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    let out = dir.path().join("run");
    let o = quick_train(&data, &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout_json(&o);
    let result: Value = serde_json::from_slice(&std::fs::read(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(printed["test_acc"], result["test_acc"]);
    assert_eq!(result["seed"], 3);
    assert_eq!(result["config"]["d"], "8");

    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i as u64 + 1);
        assert!(l["train_loss"].as_f64().unwrap().is_finite());
        assert!(l["epoch_seconds"].is_null());
    }

    let model = out.join("best.ckpt");
    let e = run(&["eval", "--data", p(&data), "--model", p(&model)]);
    assert!(e.status.success(), "{}", stderr(&e));
    let ev = stdout_json(&e);
    assert_eq!(ev["accuracy"], result["test_acc"]);
    assert_eq!(ev["split"], "test");
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = run(&["eval", "--data", p(&fixture("p3")), "--model", p(&dir.path().join("none.ckpt"))]);
    assert_eq!(missing.status.code(), Some(1));

    let data = small_data(dir.path());
    let out = dir.path().join("run");
    assert!(quick_train(&data, &out).status.success());
    let model = out.join("best.ckpt");
    let o = run(&["eval", "--data", p(&data), "--model", p(&model), "--set", "k=5"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mixer0.w1"), "{}", stderr(&o));

    let o = run(&["eval", "--data", p(&fixture("p3")), "--model", p(&model)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("w_in"), "{}", stderr(&o));
}

#[test]
fn extract_p3_hops() {
    let o = run(&["extract", "--data", p(&fixture("p3")), "--k", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("node"))
        .map(|l| l.split('\t').skip(2).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 9);
    let s = std::f64::consts::SQRT_2;
    // Rows run hop-major within each node.
    let expect = [[1.0, -s / 2.0, 1.0], [1.0, -s, 1.0], [1.0, -s / 2.0, 1.0]];
    for (node, hops) in expect.iter().enumerate() {
        for (k, want) in hops.iter().enumerate() {
            let got = rows[node * 3 + k][0];
            assert!((got - want).abs() < 1e-5, "node {node} hop {k}: {got} vs {want}");
        }
    }
}

#[test]
fn gen_synth_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path());
    assert_eq!(std::fs::read_to_string(data.join("labels.tsv")).unwrap().lines().count(), 40);

    let o = run(&["gen-synth", "--nodes", "41", "--blocks", "2", "--p-in", "0.3", "--p-out", "0.05", "--seed", "2", "--out", p(&data)]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["bench", "--data", p(&data), "--epochs", "3", "--seed", "1", "--set", "d=8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout_json(&o)["mean_epoch_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_passes_and_catches_faults() {
    let o = run(&["verify"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = String::from_utf8(o.stdout).unwrap();
    assert_eq!(lines.lines().count(), 5);
    for l in lines.lines() {
        assert_eq!(serde_json::from_str::<Value>(l).unwrap()["passed"], true);
    }

    let o = run(&["verify", "--suite", "gradient", "--inject-fault", "gradient"]);
    assert_eq!(o.status.code(), Some(1));
}
