use std::path::Path;
use std::process::{Command, Output};

use ril_cli::RunManifest;

const TINY: &str = r#"{
  "epochs_teacher": 1, "epochs_student": 1, "batch_size": 4,
  "backbone": {"stages": 3, "base_channels": 4, "input_dims": [32, 64]},
  "distill": {"same_stages": [2, 3], "cross_pairs": [[1, 2], [2, 3]]},
  "adv": {"observed_stage": 3},
  "data": {"synth": {"count": 8, "image_dims": [32, 64]}, "test_count": 4}
}"#;

fn ril(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ril"))
        .current_dir(dir)
        .env_remove("RIL_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text.lines().last().expect("stderr line");
    serde_json::from_str(line).expect("structured error")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("json result")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let dir = setup();
    std::fs::write(dir.path().join("bad.json"), r#"{"distill": {"mdoe": "off"}}"#).unwrap();
    let o = ril(dir.path(), &["synth", "--config", "bad.json", "--out", "root"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    let e = stderr_json(&o);
    assert_eq!(e["error"], "config");
    assert_eq!(e["key"], "distill.mdoe");
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = setup();
    let o = ril(dir.path(), &["train-student", "--ablation", "fusing+dual", "--teacher", "t.ckpt"]);
    assert_eq!(o.status.code(), Some(1));
    let o = ril(dir.path(), &["train-student", "--config", "tiny.json", "--teacher", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "io");
    let o = ril(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn print_config_reflects_overrides() {
    let dir = setup();
    let o = ril(
        dir.path(),
        &["train-student", "--config", "tiny.json", "--seed", "9", "--ablation", "baseline", "--teacher", "x", "--print-config"],
    );
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["seed"], 9);
    assert_eq!(v["distill"]["mode"], "off");
    assert_eq!(v["terms"]["lane_virtual"], 0.0);
}

#[test]
fn pipeline_writes_content_addressed_runs() {
    let dir = setup();
    let p = dir.path();
    let o = ril(p, &["synth", "--config", "tiny.json", "--out", "root"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["train"], 8);

    let o = ril(p, &["repaint", "--config", "tiny.json", "--data-root", "root", "--out", "virt"]);
    assert_eq!(o.status.code(), Some(0));
    let stats = std::fs::read_to_string(p.join("virt/repaint_stats.jsonl")).unwrap();
    assert_eq!(stats.lines().count(), 8);

    let args = ["train-teacher", "--config", "tiny.json", "--data-root", "root", "--virtual-root", "virt"];
    let o = ril(p, &args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    let run_dir = p.join(v["run_dir"].as_str().unwrap());
    let name = run_dir.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.starts_with("teacher-") && name.ends_with("-s0"), "{name}");
    let m = RunManifest::read(&run_dir).unwrap().unwrap();
    assert!(m.is_complete());
    assert_eq!(m.seed, 0);
    assert_eq!(m.config_checksum.len(), 64);
    assert!(m.config_checksum.starts_with(&name[8..20]));
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    // Rerunning needs --resume; with it the finished run is reused.
    let o = ril(p, &args);
    assert_eq!(o.status.code(), Some(1));
    let mut resumed = args.to_vec();
    resumed.push("--resume");
    let o = ril(p, &resumed);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout_json(&o)["reused"], true);

    let ckpt = run_dir.join("teacher.ckpt");
    let o = ril(
        p,
        &["train-student", "--config", "tiny.json", "--data-root", "root", "--teacher", ckpt.to_str().unwrap(), "--ablation", "fusing+coupled"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["teacher_unchanged"], true);
    let sdir = p.join(v["run_dir"].as_str().unwrap());
    for f in ["student.ckpt", "d_first.ckpt", "d_data.ckpt", "report.json", "manifest.json"] {
        assert!(sdir.join(f).exists(), "{f}");
    }

    let o = ril(
        p,
        &["evaluate", "--config", "tiny.json", "--data-root", "root", "--checkpoint", sdir.join("student.ckpt").to_str().unwrap(), "--report", "r.json"],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("total"));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert!(r["f1"].as_f64().unwrap() >= 0.0);
}

#[test]
fn ablate_prints_a_row_per_preset() {
    let dir = setup();
    let o = ril(dir.path(), &["ablate", "--config", "tiny.json", "--presets", "fusing,baseline", "--out-dir", "abl"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert!(rows[0].starts_with("baseline"));
    assert!(rows[1].starts_with("fusing"));
    let t: ril_cli::AblationTable =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("abl/ablation.json")).unwrap()).unwrap();
    assert!(t.complete);
    assert_eq!(t.runs.len(), 2);
    assert!(t.runs.iter().all(|r| r.teacher_checksum_before == r.teacher_checksum_after));
}

#[test]
fn synth_and_repaint_flags_override_config() {
    let dir = setup();
    let o = ril(
        dir.path(),
        &["synth", "--config", "tiny.json", "--count", "3", "--test-count", "2", "--image-dims", "32x96", "--print-config", "--out", "r"],
    );
    assert_eq!(o.status.code(), Some(0));
    let v = stdout_json(&o);
    assert_eq!(v["data"]["synth"]["count"], 3);
    assert_eq!(v["data"]["synth"]["image_dims"], serde_json::json!([32, 96]));
    assert_eq!(v["data"]["test_count"], 2);

    let o = ril(dir.path(), &["synth", "--config", "tiny.json", "--count", "3", "--output", "root"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let o = ril(
        dir.path(),
        &["repaint", "--config", "tiny.json", "--input", "root", "--output", "virt", "--gain", "1.5", "--tol", "1e-7"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_json(&o)["scenes"], 3);
    assert!(dir.path().join("virt/repaint_stats.jsonl").exists());

    let o = ril(dir.path(), &["repaint", "--config", "tiny.json", "--input", "root", "--output", "v2", "--gain=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["key"], "repaint.gain");
}
