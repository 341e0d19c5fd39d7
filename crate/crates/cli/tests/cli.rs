use std::path::Path;
use std::process::{Command, Output};

use tcdl::pipeline::TeacherConfig;
use tcdl::towers::ModelConfig;

fn tcdl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcdl")).args(args).output().expect("spawn tcdl")
}

fn ok(args: &[&str]) -> String {
    let o = tcdl(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn json(args: &[&str]) -> serde_json::Value {
    serde_json::from_str(&ok(args)).unwrap()
}

fn single_line_failure(args: &[&str]) -> String {
    let o = tcdl(args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line diagnostic: {err}");
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Corpus and a briefly trained small teacher in a fresh directory.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-corpus", "--seed", "1", "--count", "60", "--out", p(&d.join("corpus"))]);
    let cfg = TeacherConfig { model: ModelConfig::small(2, 16, 2, 32, 8), steps: 10, batch: 8, ..TeacherConfig::default() };
    std::fs::write(d.join("teacher.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    ok(&[
        "train-teacher",
        "--config",
        p(&d.join("teacher.json")),
        "--corpus",
        p(&d.join("corpus")),
        "--out",
        p(&d.join("teacher.ckpt")),
        "--steps",
        "12",
        "--metrics",
        p(&d.join("teacher.jsonl")),
    ]);
    dir
}

#[test]
fn help_lists_commands_and_flags() {
    let top = ok(&["--help"]);
    for c in ["gen-corpus", "train-teacher", "distill", "inherit-manual", "profile", "mask-report", "eval"] {
        assert!(top.contains(c), "missing {c}");
    }
    let distill = ok(&["distill", "--help"]);
    for f in ["--teacher", "--target-ratio", "--stages", "--mode", "--inherit", "--corpus", "--out", "--config"] {
        assert!(distill.contains(f), "missing {f}");
    }
    assert!(distill.contains("l0") && distill.contains("single"));
}

#[test]
fn bad_arguments_give_one_line_errors() {
    let e = single_line_failure(&["eval", "--model", "m", "--corpus", "c", "--bogus"]);
    assert!(e.contains("--bogus"));
    single_line_failure(&["distill", "--teacher", "t", "--corpus", "c", "--out", "o", "--mode", "l7"]);
    single_line_failure(&["eval", "--model", "/nonexistent/m.ckpt", "--corpus", "/nonexistent"]);
}

#[test]
fn teacher_flags_override_config_file() {
    let dir = fixture();
    let lines = std::fs::read_to_string(dir.path().join("teacher.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 12);
}

#[test]
fn eval_of_a_copy_reports_identical_recall() {
    let dir = fixture();
    let d = dir.path();
    std::fs::copy(d.join("teacher.ckpt"), d.join("copy.ckpt")).unwrap();
    let a = json(&["eval", "--model", p(&d.join("teacher.ckpt")), "--corpus", p(&d.join("corpus"))]);
    let b = json(&["eval", "--model", p(&d.join("copy.ckpt")), "--corpus", p(&d.join("corpus"))]);
    assert_eq!(a, b);
    for k in ["i2t", "t2i"] {
        let r = a[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
}

#[test]
fn auto_stages_at_quarter_target_write_three_reports() {
    let dir = fixture();
    let d = dir.path();
    let out = d.join("run");
    let summary = json(&[
        "distill",
        "--teacher",
        p(&d.join("teacher.ckpt")),
        "--corpus",
        p(&d.join("corpus")),
        "--out",
        p(&out),
        "--target-ratio",
        "0.25",
        "--stages",
        "AUTO",
        "--inherit",
        "auto",
        "--mode",
        "l1",
        "--steps",
        "30",
        "--batch",
        "8",
    ]);
    let stages = summary["stages"].as_array().unwrap();
    let targets: Vec<f64> = stages.iter().map(|s| s["target"].as_f64().unwrap()).collect();
    assert_eq!(targets, vec![0.75, 0.5, 0.25]);
    for i in 1..=3 {
        assert!(out.join(format!("stage{i}.ckpt")).exists());
        assert!(out.join(format!("stage{i}.report.json")).exists());
    }
    assert_eq!(std::fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(), 30);

    let table = ok(&["mask-report", "--model-dir", p(&out)]);
    assert_eq!(table.matches("stage ").count(), 3);
    let reports = json(&["mask-report", "--model-dir", p(&out), "--json"]);
    assert_eq!(reports.as_array().unwrap().len(), 3);

    let e = json(&["eval", "--model", p(&out.join("final.ckpt")), "--corpus", p(&d.join("corpus"))]);
    assert_eq!(e, summary["final_recall"]);
}

#[test]
fn explicit_stage_list_and_manual_inherit() {
    let dir = fixture();
    let d = dir.path();
    let out = d.join("run");
    let summary = json(&[
        "distill",
        "--teacher",
        p(&d.join("teacher.ckpt")),
        "--corpus",
        p(&d.join("corpus")),
        "--out",
        p(&out),
        "--target-ratio",
        "0.5",
        "--stages",
        "0.5",
        "--inherit",
        "manual",
        "--mode",
        "l0",
        "--steps",
        "6",
        "--batch",
        "8",
    ]);
    assert_eq!(summary["stages"].as_array().unwrap().len(), 1);
    assert!(summary["params"].as_u64().unwrap() < summary["teacher_params"].as_u64().unwrap());
    let e = single_line_failure(&["mask-report", "--model-dir", p(&out)]);
    assert!(e.contains("no stage reports"));

    let cut = json(&[
        "inherit-manual",
        "--teacher",
        p(&d.join("teacher.ckpt")),
        "--text-layers",
        "1",
        "--image-dims",
        "8",
        "--out",
        p(&d.join("cut.ckpt")),
    ]);
    assert!((cut["maskable_ratio"].as_f64().unwrap() - 0.375).abs() < 1e-12, "{cut}");
    single_line_failure(&[
        "inherit-manual",
        "--teacher",
        p(&d.join("teacher.ckpt")),
        "--text-layers",
        "3",
        "--image-dims",
        "8",
        "--out",
        p(&d.join("bad.ckpt")),
    ]);
}

#[test]
fn stage_list_must_parse() {
    let e = single_line_failure(&[
        "distill", "--teacher", "t", "--corpus", "c", "--out", "o", "--stages", "0.5,half",
    ]);
    assert!(e.contains("stages"));
}

#[test]
fn profile_reports_every_layer() {
    let dir = fixture();
    let d = dir.path();
    let v = json(&["profile", "--model", p(&d.join("teacher.ckpt")), "--corpus", p(&d.join("corpus")), "--samples", "16", "--json"]);
    assert_eq!(v["layers"].as_array().unwrap().len(), 4);
    let table = ok(&["profile", "--model", p(&d.join("teacher.ckpt")), "--corpus", p(&d.join("corpus")), "--samples", "16"]);
    assert!(table.lines().count() >= 5);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let dir = fixture();
    let d = dir.path();
    let bytes = std::fs::read(d.join("teacher.ckpt")).unwrap();
    std::fs::write(d.join("short.ckpt"), &bytes[..bytes.len() / 2]).unwrap();
    single_line_failure(&["eval", "--model", p(&d.join("short.ckpt")), "--corpus", p(&d.join("corpus"))]);
}
