//! End-to-end checks of the command surface: config parsing, artifact
//! schemas, checkpoint round-trips, exit codes, and the seed override.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stabilitylab"))
}

fn tiny_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    let body = format!(
        r#"
seed = 3
precision = "f64"
batch_size = 2
log_interval = 5
eval_interval = 10
eval_sequences = 4
{extra}

[model]
model_dim = 16
num_layers = 1
num_heads = 2
head_dim = 8
vocab_size = 32
context_length = 8

[optimizer]
max_lr = 3e-3
warmup_steps = 2
total_steps = 20

[corpus]
vocab_size = 32
"#
    );
    std::fs::write(&path, body).unwrap();
    path
}

#[test]
fn train_writes_artifacts_and_summary_schema() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let out = dir.path().join("run");
    let status = bin()
        .args(["train"])
        .arg(&config)
        .arg("--output")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let header = metrics.lines().next().unwrap();
    assert_eq!(
        header,
        "step,train_loss,eval_loss,lr_effective,log_z_mean,grad_global_norm,\
         max_attn_logit_L0,q_rms_L0,k_rms_L0,cos_at_max_L0,\
         grad_rms_b0,update_rms_b0,param_rms_b0,block_out_rms_b0"
            .replace(" ", "")
    );
    // eval cells are empty off the eval interval
    let first_row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first_row[0], "5");
    assert_eq!(first_row[2], "");

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["final_eval_loss"].is_f64());
    assert!(summary["diverged"].is_boolean());
    assert!(summary["non_embedding_params"].is_u64());
    assert!(summary["window_summaries"].is_object());
    assert!(summary.get("lr_sensitivity").is_none());
    // L=1, d=16, per-head qkln dh=8: 12*256 + 32 + 16 + 16
    assert_eq!(summary["non_embedding_params"].as_u64().unwrap(), 3136);

    assert!(out.join("checkpoint.bin").exists());
}

#[test]
fn bigram_config_trains_and_reports_d_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bigram.toml");
    std::fs::write(
        &path,
        r#"
seed = 1
batch_size = 2
log_interval = 5
eval_interval = 10
eval_sequences = 4

[model]
model_dim = 24
num_layers = 0
num_heads = 1
head_dim = 24
vocab_size = 32
context_length = 8

[optimizer]
max_lr = 1e-3
warmup_steps = 2
total_steps = 10

[corpus]
vocab_size = 32
"#,
    )
    .unwrap();
    let out = dir.path().join("bigram");
    let status = bin().args(["train"]).arg(&path).arg("--output").arg(&out).status().unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    // zero layers leave only the final layernorm scale
    assert_eq!(summary["non_embedding_params"].as_u64().unwrap(), 24);
    // attention columns exist but are empty
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[6], "");
}

#[test]
fn artifacts_are_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    for out in [&out1, &out2] {
        assert!(bin().args(["train"]).arg(&config).arg("--output").arg(out).status().unwrap().success());
    }
    for name in ["metrics.csv", "summary.json", "checkpoint.bin"] {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let out1 = dir.path().join("s3");
    let out2 = dir.path().join("s9");
    assert!(bin().args(["train"]).arg(&config).arg("--output").arg(&out1).status().unwrap().success());
    assert!(bin()
        .args(["train"])
        .arg(&config)
        .arg("--output")
        .arg(&out2)
        .env("STABILITYLAB_SEED", "9")
        .status()
        .unwrap()
        .success());
    let a = std::fs::read(out1.join("checkpoint.bin")).unwrap();
    let b = std::fs::read(out2.join("checkpoint.bin")).unwrap();
    assert_ne!(a, b, "seed override had no effect");
}

#[test]
fn unknown_config_key_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "definitely_not_a_key = 1\n").unwrap();
    let status = bin().args(["train"]).arg(&path).arg("--output").arg(dir.path().join("x")).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    let status = bin().args(["no-such-command"]).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let status = bin().status().unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn sweep_single_point_emits_zero_sensitivity() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let out = dir.path().join("sweep");
    let status = bin()
        .args(["sweep"])
        .arg(&config)
        .arg("--output")
        .arg(&out)
        .args(["--grid", "1e-3", "--jobs", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("sweep_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["lr_sensitivity"].as_f64().unwrap(), 0.0);
    assert_eq!(summary["grid"].as_array().unwrap().len(), 1);
    assert!(out.join("lr_1em3").join("summary.json").exists());
}

#[test]
fn sweep_interventions_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path(), "");
    let with = dir.path().join("qk_on");
    let without = dir.path().join("qk_off");
    for (out, qk) in [(&with, "per_head"), (&without, "off")] {
        let status = bin()
            .args(["sweep"])
            .arg(&config)
            .arg("--output")
            .arg(out)
            .args(["--grid", "1e-3", "--jobs", "1", "--qk-layernorm", qk])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(with.join("lr_1em3/checkpoint.bin")).unwrap();
    let b = std::fs::read(without.join("lr_1em3/checkpoint.bin")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn analyze_recovers_planted_quadratic() {
    let dir = tempfile::tempdir().unwrap();
    // plant y = 0.25 s^2 - 1.5 s + 2 in log10-log10 space
    let plant = |s: f64| 0.25 * s * s - 1.5 * s + 2.0;
    let mut rows = String::from("params,value\n");
    for i in 0..6 {
        let s = 5.0 + i as f64 * 0.4;
        rows.push_str(&format!("{},{}\n", 10f64.powf(s), 10f64.powf(plant(s))));
    }
    let points = dir.path().join("points.csv");
    std::fs::write(&points, rows).unwrap();
    let report_path = dir.path().join("fit.json");
    let output = bin()
        .args(["analyze", "--points-file"])
        .arg(&points)
        .args(["--target-scale", "1e9"])
        .arg("--output")
        .arg(&report_path)
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    let coeffs = report["fit"]["coefficients"].as_array().unwrap();
    assert!((coeffs[0].as_f64().unwrap() - 0.25).abs() < 1e-8);
    assert!((coeffs[1].as_f64().unwrap() + 1.5).abs() < 1e-8);
    assert!((coeffs[2].as_f64().unwrap() - 2.0).abs() < 1e-8);
    // planted value at s=9: 0.25*81 - 13.5 + 2 = 8.75 -> above the 1e4 threshold
    assert_eq!(report["prediction"]["will_diverge"].as_bool().unwrap(), true);
}

#[test]
fn gradcheck_command_passes_and_exits_zero() {
    // the full acceptance-size check runs in the acceptance suite; this one
    // keeps the wiring honest at a smaller size
    let output = bin()
        .args(["gradcheck", "--model-dim", "16", "--layers", "1", "--head-dim", "8", "--vocab-size", "12", "--context", "4"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stdout));
    let text = String::from_utf8_lossy(&output.stdout);
    assert!(text.contains("pass"));
}
