use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use tpg::cli;

fn run(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let code = cli::run(std::iter::once("tpg").chain(args.iter().copied()), &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out) = run(args);
    assert_eq!(code, 0, "tpg {args:?}");
    out
}

/// Synthesizes, cleans and trains a small model under `root`.
fn trained(root: &Path) -> (String, String) {
    let p = |n: &str| root.join(n).to_str().unwrap().to_string();
    ok(&["synthesize", "--users", "8", "--pois", "30", "--days", "20", "--seed", "4", "--out", &p("raw.tsv")]);
    ok(&["preprocess", "--input", &p("raw.tsv"), "--out", &p("data.tsv")]);
    ok(&[
        "train", "--data", &p("data.tsv"), "--epochs", "2", "--set", "model_dim=16", "--set", "time_dim=16", "--set",
        "poi_dim=8", "--set", "geo_dim=8", "--out-checkpoint", &p("ckpt"),
    ]);
    (p("data.tsv"), p("ckpt"))
}

#[test]
fn help_and_usage_errors() {
    let (code, out) = run(&["--help"]);
    assert_eq!(code, 0);
    assert!(out.contains("predict"));
    assert_eq!(run(&["frobnicate"]).0, 1);
    assert_eq!(run(&["eval", "--checkpoint", "x"]).0, 1);
}

#[test]
fn process_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_tpg");
    let status = |args: &[&str]| Command::new(bin).args(args).output().unwrap().status.code();
    assert_eq!(status(&["--version"]), Some(0));
    assert_eq!(status(&["train"]), Some(1));
    assert_eq!(status(&["preprocess", "--input", "/nonexistent/x.tsv", "--out", "/tmp/never.tsv"]), Some(2));
    assert_eq!(status(&["verify", "--corrupt-backward"]), Some(3));
}

#[test]
fn verify_reports_every_check() {
    let out = ok(&["verify"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{out}");
}

#[test]
fn interval_zero_is_plain_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let plain = ok(&["eval", "--data", &data, "--checkpoint", &ckpt]);
    let zero = ok(&["eval", "--data", &data, "--checkpoint", &ckpt, "--interval", "0", "--threads", "3"]);
    assert_eq!(plain, zero);
    let both = ok(&["eval", "--data", &data, "--checkpoint", &ckpt, "--interval", "0", "--interval", "1"]);
    assert!(both.lines().any(|l| l.starts_with("int.1")), "{both}");
}

fn by_prompt(out: &str) -> BTreeMap<String, Vec<String>> {
    let mut map = BTreeMap::new();
    let mut current = String::new();
    for line in out.lines() {
        if let Some(at) = line.strip_prefix("at ") {
            current = at.to_string();
            map.insert(current.clone(), Vec::new());
        } else {
            map.get_mut(&current).unwrap().push(line.to_string());
        }
    }
    map
}

#[test]
fn prompt_order_does_not_change_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let user = std::fs::read_to_string(&data).unwrap().split('\t').next().unwrap().to_string();
    let (a, b) = ("2024-02-01T12:30:00Z", "2024-02-03T20:00:00Z");
    let base = ["predict", "--checkpoint", &ckpt, "--user", &user, "--history-file", &data, "--topk", "4"];
    let forward = ok(&[&base[..], &["--at", a, "--at", b]].concat());
    let backward = ok(&[&base[..], &["--at", b, "--at", a]].concat());
    let single = ok(&[&base[..], &["--at", b]].concat());
    assert_eq!(by_prompt(&forward), by_prompt(&backward));
    assert_eq!(by_prompt(&forward)[b], by_prompt(&single)[b]);
    assert_eq!(by_prompt(&forward)[a].len(), 4);
}

#[test]
fn unknown_user_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let (code, _) = run(&[
        "predict", "--checkpoint", &ckpt, "--user", "nobody", "--history-file", &data, "--at", "2024-02-01T00:00:00Z",
    ]);
    assert_eq!(code, 2);
}
