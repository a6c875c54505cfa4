use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evanskit")).current_dir(dir).args(args).output().expect("spawn evanskit")
}

#[test]
fn check_writes_a_json_array() {
    let d = tempfile::tempdir().unwrap();
    let out = run(d.path(), &["check", "hamer2d", "--amp", "0.1", "--json", "c.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.path().join("c.json")).unwrap()).unwrap();
    assert!(v.as_array().is_some_and(|a| !a.is_empty()));
    assert!(d.path().join("c.manifest.json").exists());
}

#[test]
fn usage_errors_exit_two() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(d.path(), &["check", "nosuchmodel"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_exits_two() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("c.toml"), "model = \"hamer2d\"\nbogus = 1\n").unwrap();
    assert_eq!(run(d.path(), &["--config", "c.toml", "check"]).status.code(), Some(2));
}

#[test]
fn corrupt_report_input_exits_three() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("bad.json"), "{ not json").unwrap();
    assert_eq!(run(d.path(), &["report", "bad.json"]).status.code(), Some(3));
}

#[test]
fn report_marks_missing_runs() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["check", "hamer2d", "--json", "c.json"]).status.code(), Some(0));
    let out = run(d.path(), &["report", "c.manifest.json", "--json", "r.json"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("not run"), "{text}");
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        assert_eq!(run(d, &["--seed", "7", "check", "coupled2x2", "--samples", "50", "--json", "c.json"]).status.code(), Some(1));
    }
    assert_eq!(std::fs::read(a.path().join("c.json")).unwrap(), std::fs::read(b.path().join("c.json")).unwrap());
}
