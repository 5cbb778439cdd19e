use std::process::Command;

fn evohom(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_evohom")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn list_scenarios() {
    let (code, out, _) = evohom(&["list-scenarios"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 9);
    assert!(out.contains("tartar_memory"));
}

#[test]
fn selftest_exit_code() {
    let (code, out, _) = evohom(&["selftest"]);
    assert_eq!(code, 0, "{out}");
}

#[test]
fn bad_config_exits_with_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"scenario": {"name": "periodic_ode"}, "unknown": true}"#).unwrap();
    let (code, _, err) = evohom(&["gconv", "--config", path.to_str().unwrap()]);
    assert_eq!(code, 3);
    assert!(err.starts_with("error:"));
    let (code, _, _) = evohom(&["gconv", "--scenario", "nope"]);
    assert_eq!(code, 3);
    let (code, _, _) = evohom(&["gconv"]);
    assert_eq!(code, 3);
}

#[test]
fn gconv_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let (code, stdout, _) = evohom(&["gconv", "--scenario", "tartar_memory", "--schedule", "1,2,4,8", "--out", out.to_str().unwrap()]);
    assert!(code == 0 || code == 2, "{stdout}");
    assert!(stdout.contains("verdict:"));
    for f in ["gap_curve.csv", "pairings.csv", "per_k.csv", "report.json", "kernel.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let (code, _, err) = evohom(&["gconv", "--scenario", "periodic_ode", "--schedule", "1,2"]);
    assert_eq!(code, 3, "{err}");
}

#[test]
fn solve_and_kernel_commands() {
    let dir = tempfile::tempdir().unwrap();
    let (code, stdout, _) = evohom(&["solve", "--scenario", "periodic_ode", "--k", "4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["k"], 4);
    assert!(dir.path().join("solution_0.csv").exists());
    let (code, _, _) = evohom(&["kernel", "--scenario", "tartar_memory", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(dir.path().join("kernel.csv").exists());
    let (code, _, _) = evohom(&["kernel", "--scenario", "periodic_ode", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code, 3);
}
