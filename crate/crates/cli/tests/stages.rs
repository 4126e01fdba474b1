use std::path::{Path, PathBuf};
use std::process::Command;

fn smoke() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn run(out: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_crosswatch"))
        .arg("--config")
        .arg(smoke())
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .status()
        .unwrap();
    assert!(status.success(), "{args:?} exited with {status}");
}

#[test]
fn staged_commands_fill_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for stage in [
        &["generate"][..],
        &["prepare"],
        &["train-point"],
        &["train-quantile", "--axis", "lat"],
        &["train-quantile", "--axis", "lon"],
        &["pairs"],
        &["train-rfc"],
        &["detect"],
        &["avoid", "--trials", "2"],
        &["report"],
    ] {
        run(out, stage);
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    for method in ["random_forest", "relative_distance", "ci_cws"] {
        assert!(metrics["detection"][method]["true_positives"].is_u64(), "missing {method}");
    }
    assert_eq!(metrics["avoidance"]["trials"], 2);
    assert!(metrics["coverage"]["lat"]["between"].is_array());
    assert!(std::fs::read_dir(out.join("reports")).unwrap().count() > 0);
}

#[test]
fn report_without_metrics_fails() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_crosswatch"))
        .args(["--out"])
        .arg(dir.path())
        .arg("report")
        .env("RUST_LOG", "off")
        .status()
        .unwrap();
    assert!(!status.success());
}
