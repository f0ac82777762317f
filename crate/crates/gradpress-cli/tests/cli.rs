//! End-to-end CLI tests: exit codes, artifact layout, manifest
//! reproducibility, and frame inspection.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gradpress"))
}

const MINIMAL_CONFIG: &str = r#"
seed = 7
steps = 10
batch_size = 2

[problem]
kind = "quadratic"
dim = 8
condition = 10.0

[optimizer]
kind = "lans"
lr = { kind = "constant", eta = 0.05 }

[aggregation]
mode = "full_precision"
n_workers = 2
"#;

#[test]
fn train_minimal_config_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, MINIMAL_CONFIG).unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .arg("train")
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 11, "header plus one row per step");
    assert!(lines[0].starts_with("step,loss,grad_sq_norm,bytes_push,bytes_pull"));
    assert!(out.join("summary.csv").exists());
    assert!(out.join("manifest.toml").exists());
}

#[test]
fn missing_config_exits_2() {
    let status = bin().arg("train").arg("/nonexistent/config.toml").status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_config_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("{MINIMAL_CONFIG}\ntypo_field = 3\n")).unwrap();
    let status = bin().arg("train").arg(&config).status().unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn rerunning_the_manifest_reproduces_metrics_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, MINIMAL_CONFIG).unwrap();
    let out1 = dir.path().join("a");
    let out2 = dir.path().join("b");
    assert_eq!(
        bin().arg("train").arg(&config).arg("--out-dir").arg(&out1).status().unwrap().code(),
        Some(0)
    );
    assert_eq!(
        bin()
            .arg("train")
            .arg(out1.join("manifest.toml"))
            .arg("--out-dir")
            .arg(&out2)
            .status()
            .unwrap()
            .code(),
        Some(0)
    );
    let a = std::fs::read(out1.join("metrics.csv")).unwrap();
    let b = std::fs::read(out2.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ef_warning_path_still_runs() {
    // An unbiased compressor on the plain compressed path is allowed;
    // a biased one logs a warning but proceeds.
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(
        &config,
        r#"
seed = 3
steps = 5
batch_size = 2

[problem]
kind = "quadratic"
dim = 8

[optimizer]
kind = "lans"
lr = { kind = "constant", eta = 0.05 }

[aggregation]
mode = "compressed"
size_threshold_bytes = 0
n_workers = 2

[aggregation.compressor]
scaled_sign = {}
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let output = bin()
        .arg("train")
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{:?}", output);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("biased"), "expected a bias warning, got: {stderr}");
}

#[test]
fn tcp_transport_flag_runs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, MINIMAL_CONFIG).unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .arg("train")
        .arg(&config)
        .arg("--out-dir")
        .arg(&out)
        .arg("--transport")
        .arg("tcp")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
}

#[test]
fn verify_clean_passes_and_sabotage_fails() {
    let status = bin().arg("verify").arg("compressors").status().unwrap();
    assert_eq!(status.code(), Some(0));
    let status = bin()
        .arg("verify")
        .arg("compressors")
        .arg("--inject-delta-skew")
        .arg("0.5")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

fn write_frame(path: &Path) {
    use gradpress::compress::{compress, encode_frame, CompressorKind};
    use gradpress::rng::StreamKey;
    use gradpress::{DeterministicRng, GradientVector};
    let x = GradientVector::new(vec![1.0, -2.0, 3.0]).unwrap();
    let rng = DeterministicRng::new(StreamKey::new(0));
    let msg = compress(CompressorKind::ScaledSign, &x, &rng).unwrap();
    std::fs::write(path, encode_frame(&msg, 9)).unwrap();
}

#[test]
fn inspect_dumps_scaled_sign_frame() {
    let dir = tempfile::tempdir().unwrap();
    let frame = dir.path().join("t9.frame");
    write_frame(&frame);
    let output = bin().arg("inspect").arg(&frame).output().unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("scaled_sign"));
    assert!(stdout.contains("scale: 2"));
    assert!(stdout.contains("tensor_id: 9"));
}

#[test]
fn inspect_truncated_frame_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    let frame = dir.path().join("t9.frame");
    write_frame(&frame);
    let bytes = std::fs::read(&frame).unwrap();
    std::fs::write(&frame, &bytes[..bytes.len() - 2]).unwrap();
    let output = bin().arg("inspect").arg(&frame).output().unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("byte"), "offset missing from: {stderr}");
}
