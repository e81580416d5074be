//! End-to-end checks of the command-line surface: exit codes, file
//! contracts, and reproducibility from (config, overrides, seed) alone.

use std::path::Path;
use std::process::{Command, Output};

fn tsdkd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsdkd"))
        .args(args)
        .env_remove("TSDKD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

/// A configuration small enough for test-speed training runs.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "task = copy\n\
         batch_size = 4\n\
         steps = 2\n\
         eval_interval = 2\n\
         eval_size = 8\n\
         train_size = 32\n\
         max_response_len = 10\n\
         context = 24\n\
         teacher_layers = 1\n\
         teacher_d_model = 16\n\
         teacher_heads = 2\n\
         student_d_model = 8\n\
         k = 4\n\
         pretrain_steps = 3\n\
         pretrain_target = 1.0\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = tsdkd(&["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage") || stderr(&out).contains("usage"), "{}", stderr(&out));
}

#[test]
fn invalid_override_is_a_validation_error() {
    let out = tsdkd(&["distill", "--set", "beta=1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("beta"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "warp_factor = 9\n").unwrap();
    let out = tsdkd(&["distill", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unknown config key"), "{}", stderr(&out));
}

#[test]
fn missing_teacher_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = tsdkd(&[
        "distill",
        "--config",
        &cfg,
        "--set",
        "teacher_ckpt=/nonexistent/teacher.ckpt",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn gradcheck_passes_and_prints_a_table() {
    let out = tsdkd(&["gradcheck", "--trials", "8"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    for name in [
        "indirect",
        "direct",
        "entropy_min",
        "total",
        "forward_kl",
        "reverse_kl",
        "gkd_jsd",
        "sequence_ce",
        "pl_normalization",
        "jsd_forward_limit",
        "jsd_reverse_limit",
        "rescaling",
    ] {
        assert!(text.contains(name), "missing {name} in:\n{text}");
    }
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn prop1_check_reports_tiny_deviation() {
    let out = tsdkd(&["prop1-check", "--trials", "50"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("label disagreements = 0"), "{}", stdout(&out));
}

#[test]
fn pretrain_then_distill_then_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");

    let out = tsdkd(&[
        "pretrain-teacher",
        "--config",
        &cfg,
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let teacher = out_dir.join("teacher.ckpt");
    assert!(teacher.exists());
    assert!(out_dir.join("pretrain_teacher.metrics.jsonl").exists());

    let out = tsdkd(&[
        "distill",
        "--config",
        &cfg,
        "--set",
        &format!("teacher_ckpt={}", teacher.display()),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(out_dir.join("metrics.jsonl").exists());
    assert!(out_dir.join("student_final.ckpt").exists());
    assert!(out_dir.join("student_best.ckpt").exists());

    let out = tsdkd(&[
        "eval",
        "--checkpoint",
        out_dir.join("student_final.ckpt").to_str().unwrap(),
        "--config",
        &cfg,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("exact match"), "{}", stdout(&out));

    // Loss-curve plotting from the produced metrics.
    let plots = dir.path().join("plots");
    let out = tsdkd(&[
        "plot",
        "--metrics",
        out_dir.join("metrics.jsonl").to_str().unwrap(),
        "--kind",
        "loss-curves",
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    for name in ["loss_indirect", "loss_direct", "loss_em", "loss_total"] {
        assert!(plots.join(format!("{name}.svg")).exists(), "missing {name}.svg");
        assert!(plots.join(format!("{name}.csv")).exists(), "missing {name}.csv");
    }
}

#[test]
fn identical_invocations_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("shared");
    let out = tsdkd(&["pretrain-teacher", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let teacher = format!("teacher_ckpt={}", out_dir.join("teacher.ckpt").display());

    let mut streams = Vec::new();
    for name in ["a", "b"] {
        let run_dir = dir.path().join(name);
        let out = tsdkd(&[
            "distill",
            "--config",
            &cfg,
            "--set",
            &teacher,
            "--out",
            run_dir.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        streams.push(std::fs::read(run_dir.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(streams[0], streams[1]);
}

#[test]
fn mode_demo_writes_csv_and_svg() {
    let dir = tempfile::tempdir().unwrap();
    let out = tsdkd(&[
        "mode-demo",
        "--beta",
        "0.9",
        "--steps",
        "60",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("mode_demo.csv").exists());
    assert!(dir.path().join("mode_demo.svg").exists());
}

#[test]
fn out_dir_env_is_the_default_destination() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tsdkd"))
        .args(["mode-demo", "--beta", "0.5", "--steps", "30"])
        .env("TSDKD_OUT_DIR", dir.path())
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(dir.path().join("mode_demo.csv").exists());
}

#[test]
fn empty_metrics_file_is_rejected_with_no_data() {
    let dir = tempfile::tempdir().unwrap();
    let metrics = dir.path().join("metrics.jsonl");
    std::fs::write(&metrics, "").unwrap();
    let out = tsdkd(&[
        "plot",
        "--metrics",
        metrics.to_str().unwrap(),
        "--kind",
        "loss-curves",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("no data"), "{}", stderr(&out));
}

#[test]
fn profile_plot_axis_matches_row_count() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    std::fs::write(&csv, "position,mean_entropy,count\n0,0.4,8\n1,1.2,8\n2,0.9,5\n3,0.1,2\n")
        .unwrap();
    let out = tsdkd(&[
        "plot",
        "--metrics",
        csv.to_str().unwrap(),
        "--kind",
        "entropy-profile",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let twin = std::fs::read_to_string(dir.path().join("entropy_profile.csv")).unwrap();
    assert_eq!(twin.lines().count(), 5);
}
