//! CLI surface: exit codes and the machine-readable error record.

use std::process::Command;

fn dfkd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dfkd"))
}

fn write_tiny_config(dir: &std::path::Path) -> std::path::PathBuf {
    let mut cfg = dfkd::config::RunConfig::desk_default();
    cfg.output_dir = dir.join("out");
    cfg.dataset.train_per_class = 6;
    cfg.dataset.eval_per_class = 6;
    cfg.dataset.corpus_per_class = 2;
    cfg.teacher.widths = vec![3, 4, 5, 6];
    cfg.student.widths = vec![2, 3, 4, 5];
    cfg.teacher_train.epochs = 2;
    cfg.teacher_train.accuracy_floor = 0.0;
    cfg.denoiser.base_channels = 3;
    cfg.denoiser.emb_dim = 8;
    cfg.denoiser.train.steps = 5;
    cfg.synthesis.total_steps = 4;
    cfg.synthesis.rounds = 1;
    cfg.synthesis.batch_size = 2;
    cfg.synthesis.weights.eta = 0.0;
    cfg.distill.kd.epochs_per_round = 1;
    let path = dir.join("cfg.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = dfkd().args(["--definitely-not-a-flag"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = dfkd().args(["frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_domain_error_with_json_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dfkd()
        .args(["--config", cfg.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["error"]["kind"], "checkpoint");
}

#[test]
fn invalid_period_fails_validation_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = dfkd::config::RunConfig::desk_default();
    cfg.output_dir = dir.path().join("out");
    cfg.synthesis.total_steps = 10;
    cfg.synthesis.lca_period = Some(11); // k > T
    let path = dir.path().join("cfg.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let out = dfkd()
        .args(["--config", path.to_str().unwrap(), "generate"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["error"]["kind"], "config");
    // No artifacts were produced.
    assert!(!dir.path().join("out").exists());
}

#[test]
fn pipeline_stages_run_end_to_end_at_smoke_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let run = |args: &[&str]| {
        let out = dfkd()
            .args(["--config", cfg.to_str().unwrap()])
            .args(args)
            .output()
            .unwrap();
        assert_eq!(
            out.status.code(),
            Some(0),
            "stage {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    };
    run(&["train-teacher"]);
    run(&["train-diffusion"]);
    run(&["generate"]);
    run(&["distill"]);
    let eval_out = run(&["evaluate", "--split", "eval"]);
    assert!(eval_out.contains("accuracy"));
    let viz_out = run(&["visualize", "--per-class", "2"]);
    assert!(viz_out.contains("samples_grid.png"));
    // Output-root precedence: the env var redirects all artifacts.
    let env_root = dir.path().join("env_out");
    let out = dfkd()
        .args(["--config", cfg.to_str().unwrap(), "train-teacher"])
        .env("DFKD_OUTPUT_ROOT", env_root.to_str().unwrap())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(env_root.join("checkpoints/teacher.json").exists());
}
