use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[corpus]
source = synth
[backbone]
backbone = lightprop
d = 8
[fusion]
expert_hidden = 8
[train]
epochs = 3
batch_size = 256
lr = 0.01
[synth]
users = 40
items = 30
density = 6
";

fn mclmr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mclmr"))
        .args(args)
        .output()
        .unwrap()
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files_conf(dir: &Path) -> String {
    let conf = dir.join("run.conf");
    write(
        &conf,
        "[corpus]\nbehaviors = view,buy\ntarget = buy\nfiles = view.tsv,buy.tsv\n",
    );
    conf.to_string_lossy().into_owned()
}

#[test]
fn unknown_key_exits_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    write(&conf, "[train]\nlearning_rate = 0.1\n");
    let o = mclmr(&[
        "train",
        "-c",
        conf.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
    let o = mclmr(&["print-config", "--set", "train.nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mclmr(&["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn malformed_line_names_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("view.tsv"), "u1\ti1\nu2\ti2\n");
    write(&dir.path().join("buy.tsv"), "u1\ti1\nu2 i2 extra\n");
    let conf = files_conf(dir.path());
    let o = mclmr(&[
        "ingest",
        "-c",
        &conf,
        "-o",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("buy.tsv:2"), "{}", stderr(&o));
}

#[test]
fn empty_behavior_file_ingests_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("view.tsv"), "");
    write(&dir.path().join("buy.tsv"), "u1\ti1\nu2\ti2\nu1\ti3\n");
    let conf = files_conf(dir.path());
    let out = dir.path().join("out");
    let o = mclmr(&["ingest", "-c", &conf, "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["users"], 2);
    assert_eq!(v["items"], 3);
    assert_eq!(v["behaviors"][0]["edges"], 0);
    assert_eq!(v["warnings"].as_array().unwrap().len(), 1);
    assert!(out.join("id_map.json").exists());
}

#[test]
fn thresholds_set_the_exit_code() {
    let o = mclmr(&["verify-backdoor", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    let o = mclmr(&["grad-check", "--trials", "2", "--threshold", "1e-300"]);
    assert_eq!(o.status.code(), Some(3));
    let o = mclmr(&["verify-backdoor", "--card", "2,2"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn cost_estimate_reports_terms() {
    let o = mclmr(&[
        "cost-estimate",
        "--items",
        "10",
        "--behaviors",
        "3",
        "--dim",
        "4",
        "--experts",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    // N·B²·r = 10·9·1, N·B²·k·d = 10·9·2·4
    assert_eq!(v["jaccard_term"], "90");
    assert_eq!(v["moe_term"], "720");
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn train_and_analyze_are_byte_identical_on_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    write(&conf, TINY);
    let conf = conf.to_str().unwrap();
    let mut runs = Vec::new();
    let out = dir.path().join("run");
    for _ in 0..2 {
        let out_s = out.to_str().unwrap();
        let o = mclmr(&["train", "-c", conf, "-o", out_s]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let ckpt = out.join("checkpoint.json");
        let o = mclmr(&[
            "analyze",
            "-c",
            conf,
            "-o",
            out_s,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--compare",
            ckpt.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let o = mclmr(&[
            "synth-gen",
            "-c",
            conf,
            "-o",
            out.join("synth").to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        runs.push((read_all(&out), read_all(&out.join("synth"))));
    }
    let names: Vec<&str> = runs[0].0.iter().map(|(n, _)| n.as_str()).collect();
    for want in [
        "checkpoint.json",
        "history.csv",
        "history.csv.meta.json",
        "metrics.json",
        "groups.csv",
        "analysis.json",
    ] {
        assert!(names.contains(&want), "{names:?}");
    }
    assert!(runs[0] == runs[1]);
    let history = String::from_utf8(
        runs[0]
            .0
            .iter()
            .find(|f| f.0 == "history.csv")
            .unwrap()
            .1
            .clone(),
    )
    .unwrap();
    assert_eq!(history.lines().count(), 4);
    assert!(history.starts_with("epoch,bpr,cl,l2,total,hr@10\r\n"));
}

#[test]
fn ablate_single_variant_writes_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    write(&conf, TINY);
    let o = mclmr(&[
        "ablate",
        "-c",
        conf.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
        "--variants",
        "full",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    let o = mclmr(&[
        "ablate",
        "-c",
        conf.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
        "--variants",
        "w/o Nothing",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn temp_variants_cover_the_rules() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    write(&conf, TINY);
    let o = mclmr(&[
        "temp-variants",
        "-c",
        conf.to_str().unwrap(),
        "-o",
        dir.path().to_str().unwrap(),
        "--inverse",
        "--set",
        "train.epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    for r in rows {
        assert!(r["metrics"]["at_k"][0]["hr"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn worker_count_does_not_change_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tiny.conf");
    write(&conf, TINY);
    let run = |w: &str| -> serde_json::Value {
        let o = mclmr(&[
            "train",
            "-c",
            conf.to_str().unwrap(),
            "-o",
            dir.path().to_str().unwrap(),
            "--set",
            &format!("train.workers={w}"),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let (a, b) = (run("1"), run("3"));
    assert_eq!(a["metrics"], b["metrics"]);
    assert_eq!(a["best_epoch"], b["best_epoch"]);
}
