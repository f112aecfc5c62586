//! `--no-pose-init` on the default sample with default seeds.

use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn itportrait(args: &[&str], cwd: &Path) {
    let out = Command::new(env!("CARGO_BIN_EXE_itportrait"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env_remove("ITPORTRAIT_BACKEND")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn metrics(dir: &Path) -> (Value, Value) {
    let read = |f: &str| -> Value {
        serde_json::from_str(&std::fs::read_to_string(dir.join(f)).unwrap()).unwrap()
    };
    (read("metrics.json"), read("manifest.json"))
}

#[test]
fn random_start_reconstructs_worse_than_estimated_pose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    itportrait(&["toy-sample", "--out", "sample"], d);
    itportrait(
        &["invert", "--style", "sample/style.png", "--out", "est"],
        d,
    );
    itportrait(
        &[
            "invert",
            "--no-pose-init",
            "--style",
            "sample/style.png",
            "--out",
            "rand",
        ],
        d,
    );
    let (est, est_manifest) = metrics(&d.join("est"));
    let (rand, rand_manifest) = metrics(&d.join("rand"));
    assert_eq!(est_manifest["pose_init"]["source"], "estimated");
    assert_eq!(rand_manifest["pose_init"]["source"], "random");
    let (with, without) = (
        est["psnr_db"].as_f64().unwrap(),
        rand["psnr_db"].as_f64().unwrap(),
    );
    assert!(
        without < with,
        "psnr_db without pose init {without:.4} >= with pose init {with:.4}; starts {} vs {}",
        rand_manifest["pose_init"],
        est_manifest["pose_init"]
    );
}
