use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

fn corepoint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corepoint"))
        .args(args)
        .env_remove("COREPOINT_OUT")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// One demo run shared by the tests that need artifacts.
fn demo_run() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = corepoint(&["evaluate", "--config", "demo", "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stdout).contains("method cos: MIR"));
        dir
    })
    .path()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn evaluate_demo_succeeds() {
    assert!(demo_run().join("verdicts.csv").is_file());
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&corepoint(&["frobnicate"])), 2);
    assert_eq!(code(&corepoint(&["evaluate", "--method", "l7"])), 2);
}

#[test]
fn victim_is_identified_as_its_own_copy() {
    let dir = demo_run();
    let out = corepoint(&[
        "identify",
        "--fingerprint",
        path(&dir.join("fingerprint/fingerprint.json")),
        "--victim",
        path(&dir.join("zoo/victim.json")),
        "--suspect",
        path(&dir.join("zoo/victim.json")),
        "--thresholds",
        path(&dir.join("calibration.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("piracy"));
}

#[test]
fn cluster_identification_reads_the_fitted_model() {
    let dir = demo_run();
    let out = corepoint(&[
        "identify",
        "--method",
        "cluster",
        "--fingerprint",
        path(&dir.join("fingerprint/fingerprint.json")),
        "--victim",
        path(&dir.join("zoo/victim.json")),
        "--transcript",
        path(&dir.join("transcripts/pm_fl_1.json")),
        "--clusters",
        path(&dir.join("clusters.json")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_input_file_exits_3() {
    let out = corepoint(&[
        "identify",
        "--fingerprint",
        "/nonexistent/fingerprint.json",
        "--victim",
        "/nonexistent/victim.json",
        "--suspect",
        "/nonexistent/suspect.json",
        "--d2",
        "0.1",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn schema_mismatch_exits_4() {
    let dir = demo_run();
    let out = corepoint(&[
        "identify",
        "--fingerprint",
        path(&dir.join("calibration.json")),
        "--victim",
        path(&dir.join("zoo/victim.json")),
        "--suspect",
        path(&dir.join("zoo/victim.json")),
        "--d2",
        "0.1",
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn missing_config_is_created_with_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("experiment.toml");
    let out = corepoint(&[
        "train-zoo",
        "--config",
        path(&cfg),
        "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&cfg).unwrap();
    assert!(text.contains("[coregen]") && text.contains("seed = 2024"));
    assert!(dir.path().join("run/manifest.json").is_file());
}

#[test]
fn insight_curves_regenerate_from_a_run() {
    let dir = demo_run();
    let out = corepoint(&["insight-curves", "--out", path(dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("core_trace.csv"));
}
