//! End-to-end runs of the `loramix` binary, matching the documented
//! command lines byte-for-byte where output is pinned.

use std::path::Path;
use std::process::{Command, Output};

fn loramix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loramix"))
        .args(args)
        .env_remove("LORAMIX_JUDGE_URL")
        .env_remove("LORAMIX_JUDGE_KEY")
        .output()
        .expect("binary spawns")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn budget_one_minute_of_audio() {
    let out = loramix(&["budget", "--audio-seconds", "60"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("750 tokens"), "{text}");
    assert!(text.contains("fits"), "{text}");
}

#[test]
fn budget_half_hour_of_audio() {
    let out = loramix(&["budget", "--audio-seconds", "1800"]);
    assert!(out.status.success());
    assert!(stdout_of(&out).contains("22500 tokens"));
}

#[test]
fn budget_tall_image_falls_back() {
    let out = loramix(&["budget", "--image", "2000x3000", "--max-crops", "16"]);
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("2x3 grid"), "{text}");
    assert!(text.contains("6 crops"), "{text}");
    assert!(text.contains("fallback"), "{text}");
}

#[test]
fn budget_without_a_request_is_a_usage_error() {
    let out = loramix(&["budget"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn unknown_stage_name_lists_the_real_ones() {
    let out = loramix(&["train", "--stages", "bogus", "--steps-scale", "0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("speech_pretrain"), "{err}");
}

#[test]
fn zero_scale_training_still_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = loramix(&[
        "train",
        "--steps-scale",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("(no-op)"));
    assert!(out_dir.join("stage_reports.json").is_file());
    assert!(out_dir.join("fingerprints.json").is_file());
    assert!(out_dir.join("model").join("model.json").is_file());
}

#[test]
fn text_only_inference_routes_nothing() {
    let out = loramix(&["infer", "--prompt", "hello there", "--max-new", "4"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("routed adapters: []"), "{text}");
    assert!(text.contains("output:"), "{text}");
}

fn write_manifest(path: &Path, lines: &[&str]) {
    std::fs::write(path, lines.join("\n")).unwrap();
}

#[test]
fn perfect_asr_manifest_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("asr.jsonl");
    write_manifest(
        &manifest,
        &[
            r#"{"id":"a","reference":"hello world","hypothesis":"hello world","lang":"en"}"#,
            r#"{"id":"b","reference":"good morning","hypothesis":"good morning","lang":"en"}"#,
        ],
    );
    let report_path = dir.path().join("report.json");
    let out = loramix(&[
        "eval",
        "--task",
        "asr",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("Average"), "{text}");
    assert!(text.contains("0.0000"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["overall"], serde_json::json!(0.0));
    assert_eq!(report["task"], serde_json::json!("asr"));
}

#[test]
fn judged_task_without_a_judge_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("sqqa.jsonl");
    write_manifest(
        &manifest,
        &[r#"{"id":"q1","prompt":"What is two plus two?","hypothesis":"Four."}"#],
    );
    let out = loramix(&[
        "eval",
        "--task",
        "sqqa",
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn stubbed_judge_scores_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("sqqa.jsonl");
    write_manifest(
        &manifest,
        &[r#"{"id":"q1","prompt":"What is two plus two?","hypothesis":"Four."}"#],
    );
    let out = loramix(&[
        "eval",
        "--task",
        "sqqa",
        "--manifest",
        manifest.to_str().unwrap(),
        "--stub-judge",
        "[[9]]",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("9.0"), "{}", stdout_of(&out));
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defaults.json");
    std::fs::write(&cfg, r#"{"audio_seconds": 60}"#).unwrap();

    let out = loramix(&["--config", cfg.to_str().unwrap(), "budget"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("750 tokens"));

    let out = loramix(&[
        "--config",
        cfg.to_str().unwrap(),
        "budget",
        "--audio-seconds",
        "1800",
    ]);
    assert!(out.status.success());
    assert!(stdout_of(&out).contains("22500 tokens"));
}

#[test]
fn config_file_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("defaults.json");
    std::fs::write(&cfg, r#"{"bogus_knob": 1}"#).unwrap();
    let out = loramix(&["--config", cfg.to_str().unwrap(), "budget", "--audio-seconds", "1"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
}

#[test]
fn budget_reports_when_audio_does_not_fit() {
    let out = loramix(&[
        "budget",
        "--audio-seconds",
        "60",
        "--context",
        "512",
        "--reserved-text",
        "0",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(
        text.contains("fits 512-token context with 0 reserved: no"),
        "{text}"
    );
}
