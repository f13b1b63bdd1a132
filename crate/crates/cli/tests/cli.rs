use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dilam::harness::{emit_report, EvalReport, PipelineConfig};

fn dilam(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dilam"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("DILAM_LOG", "error")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn report_of_missing_file_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = dilam(dir.path(), &["report"]);
    assert!(!o.status.success());
}

#[test]
fn report_prints_tables_of_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = EvalReport::new(&PipelineConfig::default());
    report.complete = true;
    emit_report(&report, dir.path()).unwrap();
    let o = dilam(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));

    report.complete = false;
    emit_report(&report, dir.path()).unwrap();
    assert!(!dilam(dir.path(), &["report"]).status.success());
}

#[test]
fn unknown_override_is_rejected_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let o = dilam(dir.path(), &["--set", "no.such.key=1", "stats"]);
    assert!(!o.status.success());
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn malformed_config_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "seed = \"seven\"\n").unwrap();
    let o = dilam(
        &dir.path().join("out"),
        &["--config", config.to_str().unwrap(), "stats"],
    );
    assert!(!o.status.success());
}

#[test]
fn held_lock_blocks_a_second_run() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".lock"), "1\n").unwrap();
    let o = dilam(dir.path(), &["stats"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("in use"), "{}", stderr(&o));
    assert!(dir.path().join(".lock").exists());
}

#[test]
fn failed_stage_marks_directory_stale_and_releases_lock() {
    let dir = tempfile::tempdir().unwrap();
    let o = dilam(
        dir.path(),
        &[
            "--set",
            "data.train-per-class=2",
            "--set",
            "data.test-per-class=2",
            "stats",
        ],
    );
    assert!(!o.status.success());
    assert!(dir.path().join("STALE").exists());
    assert!(!dir.path().join(".lock").exists());
}
