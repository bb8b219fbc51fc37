//! Binary-level tests: artifact outputs and exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpbridge"))
}

fn write_small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
master_seed = 11

[schedule]
t_max = 120

[dataset]
height = 16
width = 16
n_train = 48
n_val = 8
n_test = 8

[train]
total_iters = 40
hidden = 48
blocks = 1
time_embed = 16
checkpoint_every = 0

[eval]
n_eval = 4
sweep_steps = [1, 2, 5]
"#,
    )
    .unwrap();
    path
}

#[test]
fn full_cli_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.dpbk");

    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-data", "--task", "depth"])
        .args(["--out", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(data.join("manifest.txt").exists());

    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "train"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", ckpt.to_str().unwrap()])
        .args(["--log", dir.path().join("log.csv").to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    assert!(log.starts_with("iteration,elbo_loss,ic_loss,total_loss,wall_ms"));
    assert_eq!(log.lines().count(), 41);

    let prefix = dir.path().join("pred");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "sample"])
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out-prefix", prefix.to_str().unwrap()])
        .args(["--steps", "5", "--g-mode", "deterministic"])
        .status()
        .unwrap();
    assert!(st.success());
    let pgm = std::fs::read(dir.path().join("pred.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));
    assert!(dir.path().join("pred_latent.dpbt").exists());
    assert!(dir.path().join("pred_pred.dpbt").exists());

    let metrics = dir.path().join("metrics.csv");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "eval"])
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", metrics.to_str().unwrap()])
        .args(["--steps", "5"])
        .status()
        .unwrap();
    assert!(st.success());
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with(
        "task,n_steps,noise_kind,noise_level,absrel,delta1,mean_angle,pct11_25,n_samples,seed"
    ));
    assert_eq!(csv.lines().count(), 2);

    let sweep = dir.path().join("sweep.csv");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "sweep-steps"])
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out", sweep.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    // Header plus one row per configured step count.
    assert_eq!(std::fs::read_to_string(&sweep).unwrap().lines().count(), 4);
}

#[test]
fn gen_data_same_seed_identical_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path());
    for name in ["a", "b"] {
        let st = bin()
            .args(["--config", cfg.to_str().unwrap(), "gen-data"])
            .args(["--out", dir.path().join(name).to_str().unwrap()])
            .status()
            .unwrap();
        assert!(st.success());
    }
    let a = std::fs::read(dir.path().join("a/manifest.txt")).unwrap();
    let b = std::fs::read(dir.path().join("b/manifest.txt")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn invalid_task_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["gen-data", "--task", "segmentation"])
        .args(["--out", dir.path().join("d").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--checkpoint", "/nonexistent/model.dpbk"])
        .args(["--data", dir.path().to_str().unwrap()])
        .args(["--out", dir.path().join("m.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dpbk");
    std::fs::write(&bad, b"XXXXnot a checkpoint").unwrap();
    let out = bin()
        .args(["eval", "--checkpoint", bad.to_str().unwrap()])
        .args(["--data", dir.path().to_str().unwrap()])
        .args(["--out", dir.path().join("m.csv").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn bad_config_key_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "unknown_top_level = true\n").unwrap();
    let out = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-data"])
        .args(["--out", dir.path().join("d").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_runs_and_writes_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("verify.jsonl");
    let coeffs = dir.path().join("coeffs.csv");
    // The suite builds the default T=1000 schedule regardless of config.
    let out = bin()
        .args(["verify"])
        .args(["--out", report.to_str().unwrap()])
        .args(["--dump-coeffs", coeffs.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.lines().count() >= 12);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["pass"], true, "{line}");
    }
    let coeff_text = std::fs::read_to_string(&coeffs).unwrap();
    assert!(coeff_text.starts_with("t,m,n,sbar,a,b,delta,k1,k2,k3,post_std"));
    assert_eq!(coeff_text.lines().count(), 1002);
}
