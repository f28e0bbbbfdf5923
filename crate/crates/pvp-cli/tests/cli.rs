//! Exit-code and wiring tests for the `pvp` binary, on a tiny config.

use std::path::Path;
use std::process::{Command, Output};

fn pvp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pvp"))
        .args(args)
        .current_dir(dir)
        .env_remove("PVP_OUT")
        .output()
        .expect("binary runs")
}

fn tiny_config_json() -> String {
    serde_json::json!({
        "schema_version": 1,
        "dataset": {
            "n_objects": 6,
            "canvas_px": 16,
            "color_blob_px": 12,
            "n_eval_objects": 2,
            "heldout_cf_per_object": 2,
            "train_cf_per_object": 3,
            "train_this_repeats": 1,
            "train_most_repeats": 1,
            "train_text_most_repeats": 2,
            "steer_repeats": 1,
            "eval_wk_repeats": 1,
            "eval_cf_repeats": 1,
            "eval_relation_fraction": 0.34,
            "size_this_repeats": 1,
            "size_most_repeats": 1,
            "size_text_most_repeats": 2,
            "size_steer_repeats": 1,
            "size_eval_wk_repeats": 1,
            "size_eval_cf_repeats": 1,
            "size_aux_pairs": 4,
            "size_aux_repeats": 1
        },
        "model": {
            "n_layers": 2,
            "d_model": 16,
            "n_heads": 2,
            "mlp_hidden": 32,
            "patch_px": 8,
            "max_seq": 16,
            "tie_unembedding": true
        },
        "train": {
            "prior_epochs": 1,
            "epochs": 1,
            "batch_size": 16,
            "learning_rate": 3e-4,
            "beta1": 0.9,
            "beta2": 0.999,
            "adam_eps": 1e-8,
            "clip_norm": 1.0
        },
        "steering": {
            "alpha": 1.0,
            "start_min": 0,
            "start_max": 1,
            "window_max": 1,
            "probe_pairs": 2
        },
        "seeds": { "dataset": 1, "init": 2, "train": 3 }
    })
    .to_string()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = pvp(&["definitely-not-a-subcommand"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = pvp(&[], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_upstream_artifacts_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pvp.json"), tiny_config_json()).unwrap();
    let out = pvp(&["--out", "out", "steer", "eval"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("run `gen` first") || stderr.contains("not found"),
        "stderr: {stderr}"
    );
}

#[test]
fn gen_is_idempotent_and_train_follows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pvp.json"), tiny_config_json()).unwrap();

    let out = pvp(&["--out", "out", "gen"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let out = pvp(&["--out", "out", "gen"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("up to date"), "stdout: {stdout}");

    let out = pvp(&["--out", "out", "train"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("out/model/checkpoint.bin").exists());
    assert!(dir.path().join("out/model/run.json").exists());

    // Eval goes through against the fresh checkpoint.
    let out = pvp(&["--out", "out", "eval"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_exits_1_with_named_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value = serde_json::from_str(&tiny_config_json()).unwrap();
    config["model"]["d_model"] = serde_json::json!(65);
    std::fs::write(dir.path().join("pvp.json"), config.to_string()).unwrap();
    let out = pvp(&["--out", "out", "gen"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("d_model"));
}

#[test]
fn seed_override_changes_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pvp.json"), tiny_config_json()).unwrap();
    let out = pvp(&["--out", "a", "gen"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let out = pvp(
        &["--out", "b", "--seed-override", "dataset=99", "gen"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let a = std::fs::read(dir.path().join("a/dataset/manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/dataset/manifest.json")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn env_var_sets_output_root() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pvp.json"), tiny_config_json()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_pvp"))
        .args(["gen"])
        .current_dir(dir.path())
        .env("PVP_OUT", "from-env")
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("from-env/dataset/manifest.json").exists());
}

#[test]
fn concurrent_invocations_are_rejected_by_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("pvp.json"), tiny_config_json()).unwrap();
    std::fs::create_dir_all(dir.path().join("out")).unwrap();
    std::fs::write(dir.path().join("out/.pvp-lock"), b"").unwrap();
    let out = pvp(&["--out", "out", "gen"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lock"));
}
