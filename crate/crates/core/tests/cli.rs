//! The `bkprobe` binary end to end on weight-free models: exit codes, JSON
//! status output, resumption and the analysis/report artifacts.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bkprobe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bkprobe"))
        .args(args)
        .current_dir(cwd)
        .env("BKPROBE_WEIGHTS_DIR", cwd.join("no-weights"))
        .env_remove("BKPROBE_OFFLINE")
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| panic!("not JSON ({e}): {text}"))
}

#[test]
fn offline_without_weights_is_an_environment_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(bkprobe(&["generate-stimuli", "--pairs", "2", "--resolution", "32"], d).status.code(), Some(0));
    let out = bkprobe(&["--json", "run-prob-probe", "--model", "resnet50", "--offline"], d);
    assert_eq!(out.status.code(), Some(2));
    let v = json(&out);
    assert_eq!(v["status"], "failed");
    assert_eq!(v["details"]["environment"], true);
    assert!(v["message"].as_str().unwrap().contains("resnet50"));
    // nothing was written for the failed model
    assert!(!d.join("out/results/prob_trials.jsonl").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(bkprobe(&["run-prob-probe", "--model", "clip"], dir.path()).status.code(), Some(2));
    assert_eq!(bkprobe(&["no-such-command"], dir.path()).status.code(), Some(2));
    assert_eq!(bkprobe(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn missing_stimuli_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = bkprobe(&["--json", "run-gradcam-probe", "--model", "toy"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(json(&out)["message"].as_str().unwrap().contains("stimuli.manifest.json"));
}

#[test]
fn toy_pipeline_runs_resumes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let gen = bkprobe(&["--json", "generate-stimuli", "--pairs", "3", "--resolution", "48", "--svg"], d);
    assert_eq!(gen.status.code(), Some(0));
    assert_eq!(json(&gen)["details"]["pairs"], 3);

    let run = ["--json", "run-prob-probe", "--model", "toy", "--word-type", "original,adjective"];
    let first = bkprobe(&run, d);
    assert_eq!(first.status.code(), Some(0), "{}", String::from_utf8_lossy(&first.stderr));
    // 10 prompts x 2 word types x 6 images
    assert_eq!(json(&first)["details"]["total"]["computed"], 120);
    assert_eq!(json(&first)["details"]["total"]["outcomes"], 60);
    let again = json(&bkprobe(&run, d));
    assert_eq!(again["details"]["total"]["computed"], 0);
    assert_eq!(again["details"]["total"]["skipped"], 120);

    let cam = bkprobe(&["--json", "run-gradcam-probe", "--model", "toy", "--word-type", "original", "--save-maps", "full"], d);
    assert_eq!(cam.status.code(), Some(0));
    // 10 prompts x 6 composites x 4 labels
    assert_eq!(json(&cam)["details"]["total"]["computed"], 240);
    let npz = walk(&d.join("out/saliency")).into_iter().filter(|p| p.extension().is_some_and(|e| e == "npz")).count();
    assert_eq!(npz, 240);

    assert_eq!(bkprobe(&["analyze"], d).status.code(), Some(0));
    let rep = bkprobe(&["--json", "report", "--human-baseline", "0.88"], d);
    assert_eq!(rep.status.code(), Some(0));
    for f in ["prob_pairs.svg", "gradcam_pairs.svg", "gradcam_labels.svg", "summary.md"] {
        assert!(d.join("out/report").join(f).exists(), "{f}");
    }
    let estimates = std::fs::read_to_string(d.join("out/analysis/estimates.csv")).unwrap();
    assert!(estimates.lines().next().unwrap().starts_with("experiment,model,word_type"));
    assert!(estimates.contains("prob_pairs,toy,adjective,all,all"));

    let labels = bkprobe(&["labels", "export", "--out", "labels.json"], d);
    assert_eq!(labels.status.code(), Some(0));
    let v: Value = serde_json::from_str(&std::fs::read_to_string(d.join("labels.json")).unwrap()).unwrap();
    assert_eq!(v["label_sets"].as_array().unwrap().len(), 4);
}

#[test]
fn report_without_results_still_renders() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(bkprobe(&["report"], d).status.code(), Some(2));
    assert_eq!(bkprobe(&["analyze"], d).status.code(), Some(0));
    assert_eq!(bkprobe(&["report"], d).status.code(), Some(0));
    let svg = std::fs::read_to_string(d.join("out/report/prob_pairs.svg")).unwrap();
    assert!(svg.contains("no data"));
}

#[test]
fn changing_the_seed_of_an_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    bkprobe(&["generate-stimuli", "--pairs", "1", "--resolution", "32"], d);
    assert_eq!(bkprobe(&["run-prob-probe", "--model", "toy", "--word-type", "original"], d).status.code(), Some(0));
    let out = bkprobe(&["run-prob-probe", "--model", "toy", "--word-type", "original", "--seed-base", "5"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed_base"));
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = std::fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}
