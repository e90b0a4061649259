use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nlexp"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

#[test]
fn gheat_solve_writes_csv() {
    let out = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["run", configs().join("gheat.cfg").to_str().unwrap(), "--suite", "solve", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let csv = std::fs::read_to_string(out.path().join("gheat_u1.csv")).unwrap();
    assert!(csv.starts_with("x,u\n"));
    assert_eq!(csv.lines().count(), 402);
    let report = std::fs::read_to_string(out.path().join("report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 2);
    assert!(out.path().join("timings.jsonl").exists());
}

#[test]
fn bad_domination_exits_one_with_witness() {
    let out = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["run", configs().join("bad_domination.cfg").to_str().unwrap(), "--suite", "domination", "--out"])
        .arg(out.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("witness"), "{err}");
}

#[test]
fn remark_counterexample_reports_mismatch() {
    let out = tempfile::tempdir().unwrap();
    let st = bin()
        .args(["run", configs().join("remark_counterexample.cfg").to_str().unwrap(), "--suite", "expectation", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(0));
    let report = std::fs::read_to_string(out.path().join("report.jsonl")).unwrap();
    assert!(report.contains("\"mismatch\":2.0"), "{report}");
}

#[test]
fn config_errors_exit_two() {
    let out = tempfile::tempdir().unwrap();
    let bad = out.path().join("bad.cfg");
    std::fs::write(&bad, "[run]\nseed = \"x\"\n").unwrap();
    let st = bin().args(["run", bad.to_str().unwrap(), "--out"]).arg(out.path()).status().unwrap();
    assert_eq!(st.code(), Some(2));

    let st = bin()
        .args(["run", configs().join("remark_counterexample.cfg").to_str().unwrap(), "--suite", "oracle", "--out"])
        .arg(out.path())
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(2));

    let st = bin().args(["run", "/nonexistent.cfg"]).status().unwrap();
    assert_eq!(st.code(), Some(2));
}

#[test]
fn identical_runs_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, extra) in [(&a, None), (&b, Some("--parallel"))] {
        let mut cmd = bin();
        cmd.args(["run", configs().join("gheat.cfg").to_str().unwrap(), "--suite", "solve,axioms,domination", "--seed", "5", "--out"])
            .arg(dir.path());
        if let Some(f) = extra {
            cmd.arg(f);
        }
        assert_eq!(cmd.status().unwrap().code(), Some(0));
    }
    let ra = std::fs::read(a.path().join("report.jsonl")).unwrap();
    let rb = std::fs::read(b.path().join("report.jsonl")).unwrap();
    assert_eq!(ra, rb);
}
