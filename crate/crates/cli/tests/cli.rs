use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn run(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_hifirec")).args(args).env("RUST_LOG", "warn").output().unwrap();
    out
}

fn ok(args: &[&str]) -> Vec<Value> {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 8] = ["--dim", "8", "--layers", "1", "--epochs", "4", "--patience", "0"];

fn synth(dir: &Path) -> String {
    let data = dir.join("data");
    let lines = ok(&["synth", "--out", path(&data), "--users", "40", "--items", "80"]);
    assert_eq!(lines[0]["users"], 40);
    path(&data).to_string()
}

#[test]
fn train_writes_frozen_config_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let a = dir.path().join("a");
    let mut args = vec!["train", "--data", &data, "--out", path(&a), "--lr", "0.01"];
    args.extend(SMALL);
    let lines = ok(&args);
    let epochs: Vec<&Value> = lines.iter().filter(|l| l.get("epoch").is_some()).collect();
    assert_eq!(epochs.len(), 5);
    for key in ["epoch", "L_view", "L_add", "L_purchase", "reg", "total", "wall_ms"] {
        assert!(epochs[0].get(key).is_some(), "{key}");
    }
    for f in ["config.toml", "epochs.jsonl", "checkpoint.bin", "metrics.jsonl"] {
        assert!(a.join(f).exists(), "{f}");
    }

    let b = dir.path().join("b");
    let frozen = a.join("config.toml");
    ok(&["train", "--data", &data, "--out", path(&b), "--config", path(&frozen)]);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), fs::read(b.join("checkpoint.bin")).unwrap());
    assert_eq!(fs::read_to_string(a.join("metrics.jsonl")).unwrap(), fs::read_to_string(b.join("metrics.jsonl")).unwrap());

    let eval = ok(&["evaluate", "--checkpoint", path(&a.join("checkpoint.bin")), "--data", &data, "--split", "test"]);
    let metrics = fs::read_to_string(a.join("metrics.jsonl")).unwrap();
    let test: Value = metrics.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()).find(|v| v["split"] == "test").unwrap();
    for key in ["HR@10", "NDCG@10", "HR@100", "NDCG@100"] {
        assert_eq!(eval[0][key], test[key], "{key}");
    }

    let c = dir.path().join("c");
    let lines = ok(&["train", "--data", &data, "--out", path(&c), "--config", path(&frozen), "--resume", path(&a.join("checkpoint.bin"))]);
    assert_eq!(lines.iter().filter(|l| l.get("total").is_some()).count(), 5);
}

#[test]
fn ablation_is_independent_of_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let variants = "W-NB+U-NS;F-NB+I-NS";
    let run_with = |n: &str, out: &str| {
        let out = dir.path().join(out);
        let mut args = vec!["ablate", "--data", &data, "--out", path(&out), "--variants", variants, "--parallel", n];
        args.extend(SMALL);
        let lines = ok(&args);
        assert!(out.join("config.toml").exists());
        (lines, fs::read_to_string(out.join("ablation.jsonl")).unwrap())
    };
    let (one, file_one) = run_with("1", "p1");
    let (two, file_two) = run_with("2", "p2");
    assert_eq!(one.len(), 2);
    assert_eq!(one[0]["variant"], "W-NB+U-NS");
    assert_eq!(file_one, file_two);
    assert_eq!(one, two);

    let table = run(&["report", path(&dir.path().join("p1/ablation.jsonl"))]);
    let text = String::from_utf8(table.stdout).unwrap();
    assert!(text.lines().next().unwrap().contains("HR@10"));
    assert!(text.contains("F-NB+I-NS"));
}

#[test]
fn grid_and_reference_study() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let g = dir.path().join("grid");
    let mut args = vec!["grid", "--data", &data, "--out", path(&g), "--cs", "0.1,1", "--xs", "0.25,0.5"];
    args.extend(SMALL);
    let cells = ok(&args);
    assert_eq!(cells.len(), 4);
    assert_eq!((cells[1]["C"].as_f64(), cells[1]["x"].as_f64()), (Some(0.1), Some(0.5)));
    let pivot = run(&["report", path(&g.join("grid.jsonl")), "--grid-metric", "HR@10"]);
    assert_eq!(String::from_utf8(pivot.stdout).unwrap().lines().count(), 3);

    let r = dir.path().join("ref");
    let mut args = vec!["refstudy", "--data", &data, "--out", path(&r), "--bins", "5"];
    args.extend(SMALL);
    let rows = ok(&args);
    let refs: Vec<&str> = rows.iter().map(|v| v["k_ref"].as_str().unwrap()).collect();
    assert_eq!(refs, ["view", "add", "purchase"]);
    assert_eq!(rows[0]["weights"].as_array().unwrap().len(), 3);
    assert_eq!(rows[0]["weights"][0]["histogram"].as_array().unwrap().len(), 5);
}

#[test]
fn prepare_filters_and_splits_raw_logs() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.csv");
    let mut text = String::from("user,item,type,time\n");
    let mut t = 0;
    for u in 0..6 {
        for i in 0..5 {
            t += 1;
            text.push_str(&format!("u{u},i{i},pv,{t}\n"));
            if i < 3 {
                t += 1;
                text.push_str(&format!("u{u},i{i},buy,{t}\n"));
            }
        }
    }
    // too few interactions; dropped by the filter
    text.push_str("lonely,i0,pv,1\n");
    fs::write(&raw, text).unwrap();
    let out = dir.path().join("prepared");
    let stats = ok(&[
        "prepare", "--input", path(&raw), "--out", path(&out), "--delimiter", ",", "--header",
        "--alias", "pv=view", "--alias", "buy=purchase", "--min-interactions", "2", "--min-purchases", "3",
    ]);
    assert_eq!(stats[0]["users"], 6);
    assert_eq!(stats[0]["valid_users"], 6);
    assert_eq!(stats[0]["purchase"], 18);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "freq.tsv", "stats.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let bad = run(&["prepare", "--input", path(&raw), "--out", path(&out), "--delimiter", ","]);
    assert!(!bad.status.success());
}

#[test]
fn invalid_configuration_fails() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path());
    let out = dir.path().join("x");
    assert!(!run(&["train", "--data", &data, "--out", path(&out), "--c", "1.5"]).status.success());
    assert!(!run(&["train", "--data", &data, "--variant", "F-NB+I-NS", "--neighborhood", "P-NB"]).status.success());
    assert!(!run(&["evaluate", "--checkpoint", path(&out.join("missing.bin")), "--data", &data]).status.success());
}
