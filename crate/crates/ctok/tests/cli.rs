//! Exit-code and output contract checks for the `ctok` binary.

use std::io::Write;
use std::process::{Command, Output};

fn ctok(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctok"))
        .args(args)
        .current_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
        .output()
        .expect("spawn ctok")
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(ctok(&["--help"]).status.code(), Some(0));
    assert_eq!(ctok(&["--version"]).status.code(), Some(0));
    assert_eq!(ctok(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_required_argument_exits_one_with_usage() {
    let out = ctok(&[
        "train",
        "--concept",
        "data/concepts/hallucinations.json",
        "--preset",
        "hallucinations",
        "--out",
        "/tmp/never-written.ctok",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--corpus"), "stderr was: {stderr}");
    assert!(stderr.contains("Usage"), "stderr was: {stderr}");
}

#[test]
fn unknown_condition_exits_one() {
    let out = ctok(&[
        "eval-qa",
        "--dataset",
        "data/qa/sample.jsonl",
        "--concept",
        "data/concepts/hallucinations.json",
        "--condition",
        "sideways",
        "--out",
        "/tmp/never-written",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_preset_exits_one() {
    let out = ctok(&[
        "train",
        "--corpus",
        "data/hallucinations.jsonl",
        "--concept",
        "data/concepts/hallucinations.json",
        "--preset",
        "warp-speed",
        "--out",
        "/tmp/never-written.ctok",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_requires_exactly_one_input() {
    assert_eq!(ctok(&["metrics"]).status.code(), Some(1));
    let out = ctok(&[
        "metrics",
        "--labels",
        "a.jsonl",
        "--annotations",
        "b.jsonl",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_on_missing_file_exits_one() {
    let out = ctok(&["metrics", "--labels", "/tmp/does-not-exist.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn metrics_reproduces_reported_precision_from_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.jsonl");
    let mut f = std::fs::File::create(&path).unwrap();
    let mut write_n = |n: usize, label: &str| {
        for i in 0..n {
            writeln!(
                f,
                "{{\"id\":\"{label}-{i}\",\"question\":\"q\",\"gold_answer\":\"g\",\
                 \"generated\":\"a\",\"label\":\"{label}\",\"judge_error\":null}}"
            )
            .unwrap();
        }
    };
    write_n(176, "CORRECT");
    write_n(219, "HALLUCINATION");
    write_n(605, "NO_ANSWER");
    let out = ctok(&[
        "metrics",
        "--labels",
        path.to_str().unwrap(),
        "--method",
        "ct_negated",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("44.56"), "stdout was: {stdout}");
    assert!(stdout.contains("ct_negated"), "stdout was: {stdout}");
}
