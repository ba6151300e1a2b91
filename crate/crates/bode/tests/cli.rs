use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use bode::pipeline::Comparison;
use bode::report::RunReport;

fn bode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bode")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bode(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn generate_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["generate", "--seed", "7", "--out", a.to_str().unwrap()]);
    ok(&["generate", "--seed", "7", "--out", b.to_str().unwrap()]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 102);
    assert!(ta == tb);
    let meta: serde_json::Value = serde_json::from_slice(&fs::read(a.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["ledger"]["train"].as_array().unwrap().len(), 70);
    assert_eq!(meta["ledger"]["validation"].as_array().unwrap().len(), 29);
    assert_eq!(meta["ledger"]["test"].as_array().unwrap().len(), 1);
}

#[test]
fn validation_errors_exit_with_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bode(&["generate", "--nx", "4", "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("x").exists());

    let d = tmp.path().join("d");
    ok(&["generate", "--out", d.to_str().unwrap()]);
    assert_eq!(bode(&["generate", "--out", d.to_str().unwrap()]).status.code(), Some(2));
    ok(&["generate", "--force", "--out", d.to_str().unwrap()]);

    let out = bode(&["bode", "--sobol", "9", "--iters", "4", "--out", tmp.path().join("y").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(bode(&["baseline", "--members", "1", "--out", tmp.path().join("z").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bode(&["evaluate", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn baseline_smoke_run_and_evaluation() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let start = Instant::now();
    ok(&["baseline", "--members", "2", "--nx", "8", "--nz", "8", "--epochs", "5", "--seed", "3", "--out", run.to_str().unwrap()]);
    assert!(start.elapsed().as_secs() < 60);

    let report: RunReport = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.members.len(), 2);
    assert!(report.members.iter().all(|m| m.test_rmse.is_finite()));
    assert!(report.ensemble.rmse.is_finite());
    let text = fs::read_to_string(run.join("report.json")).unwrap();
    assert_eq!(serde_json::from_str::<RunReport>(&text).unwrap(), report);

    let rows = report.dataset.nx * report.dataset.nz * report.dataset.test_frames.len();
    for (file, fixture) in [("predictions.csv", "predictions_header.csv"), ("uncertainty.csv", "uncertainty_header.csv")] {
        let csv = fs::read_to_string(run.join(file)).unwrap();
        let golden = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(fixture)).unwrap();
        assert_eq!(csv.lines().next().unwrap(), golden.trim_end());
        assert_eq!(csv.lines().count(), rows + 1);
    }
    assert!(run.join("checkpoints/member_01.ckpt").exists());

    let out = ok(&["evaluate", run.to_str().unwrap(), run.to_str().unwrap(), "--out", tmp.path().join("cmp").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("rmse ratio"));
    let cmp: Comparison = serde_json::from_slice(&fs::read(tmp.path().join("cmp/comparison.json")).unwrap()).unwrap();
    assert!(cmp.runs.iter().all(|r| r.matches_stored_report));
    let d = &cmp.difference;
    assert_eq!([d.rmse, d.r2, d.mean_nll, d.coverage_68, d.coverage_95, d.mean_total_std, d.mean_aleatoric_std, d.mean_epistemic_std], [0.0; 8]);
    assert_eq!(cmp.runs[0].ensemble, report.ensemble);

    let again = tmp.path().join("again");
    ok(&["baseline", "--config", run.join("manifest.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(fs::read(run.join("report.json")).unwrap(), fs::read(again.join("report.json")).unwrap());
}

#[test]
fn noisy_run_reports_noise_recovery() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&["baseline", "--members", "2", "--nx", "8", "--nz", "8", "--epochs", "3", "--noise", "0.05", "--eval-draws", "2", "--out", run.to_str().unwrap()]);
    let report: RunReport = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    let rec = report.noise_recovery.expect("noisy runs report recovery");
    assert!(rec.injected_mean_std > 0.0 && rec.aleatoric_to_injected_ratio > 0.0);
    let out = ok(&["evaluate", run.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("alea/injected"));
    assert!(text.contains("\"aleatoric_to_injected_ratio\""));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 11, "nx": 9, "timesteps": 120}"#).unwrap();
    let out = tmp.path().join("gen");
    ok(&["generate", "--config", cfg.to_str().unwrap(), "--nx", "10", "--out", out.to_str().unwrap()]);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 11);
    assert_eq!(manifest["config"]["nx"], 10);
    assert_eq!(manifest["config"]["timesteps"], 120);
    assert_eq!(manifest["config"]["nz"], 16);
    fs::write(&cfg, r#"{"sed": 1}"#).unwrap();
    assert_eq!(bode(&["generate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("g2").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn training_reads_a_generated_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["generate", "--nx", "8", "--nz", "8", "--seed", "2", "--out", data.to_str().unwrap()]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["baseline", "--members", "2", "--epochs", "2", "--data", data.to_str().unwrap(), "--seed", "2", "--out", a.to_str().unwrap()]);
    ok(&["baseline", "--members", "2", "--epochs", "2", "--nx", "8", "--nz", "8", "--seed", "2", "--out", b.to_str().unwrap()]);
    // the in-memory and on-disk datasets are the same data
    assert_eq!(fs::read(a.join("predictions.csv")).unwrap(), fs::read(b.join("predictions.csv")).unwrap());
}
