//! Run artifacts: `report.json`, `manifest.json`, `predictions.csv`,
//! `uncertainty.csv` and `trials.jsonl`.
//!
//! `report.json` holds only quantities that are a pure function of the
//! configuration, so re-running a manifest reproduces it byte for byte. Wall
//! times live in `trials.jsonl` only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bode_core::ensemble::EnsemblePrediction;
use bode_core::hyperspace::{HyperConfig, TrainingConfig};
use bode_core::metrics::MetricReport;
use bode_core::orchestrator::TrialLog;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const PREDICTIONS_HEADER: &str = "x,z,t,y_true,y_pred";
pub const UNCERTAINTY_HEADER: &str = "x,z,t,mean,total_var,aleatoric_var,epistemic_var";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub nx: usize,
    pub nz: usize,
    pub timesteps: usize,
    pub seed: u64,
    pub train_frames: usize,
    pub validation_frames: usize,
    pub test_frames: Vec<usize>,
    pub bo_train_frames: usize,
    pub bo_val_frames: usize,
    /// RMS of the clean target over the test frames.
    pub test_target_rms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub sigma: f64,
    pub filter_width: f64,
    pub seed: u64,
    pub eval_draws: usize,
}

/// Predicted uncertainty against the injected noise level on the test frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecovery {
    /// Domain mean of `sigma * clean target`.
    pub injected_mean_std: f64,
    pub predicted_total_mean_std: f64,
    pub predicted_aleatoric_mean_std: f64,
    pub total_to_injected_ratio: f64,
    pub aleatoric_to_injected_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberSummary {
    pub index: usize,
    pub seed: u64,
    pub epochs: usize,
    pub config: TrainingConfig,
    pub final_train_rmse: f64,
    pub final_validation_rmse: Option<f64>,
    pub test_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub member: usize,
    pub member_seed: u64,
    pub trials: usize,
    pub best_rmse: f64,
    pub best: HyperConfig,
    pub running_min: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub width_divisor: usize,
    pub dataset: DatasetSummary,
    pub noise: Option<NoiseSummary>,
    pub members: Vec<MemberSummary>,
    /// Test-frame metrics of the ensemble against the evaluation targets
    /// (noisy draws for noisy runs).
    pub ensemble: MetricReport,
    /// Ensemble mean against the clean test targets.
    pub clean_test_rmse: f64,
    pub noise_recovery: Option<NoiseRecovery>,
    pub search: Option<Vec<SearchSummary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub members: Vec<u64>,
    pub noise: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: RunConfig,
    pub seeds: Seeds,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text + "\n").map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

/// Coordinates of every evaluated point: `(x, z, t)`.
pub type Coords = [f64; 3];

pub fn predictions_csv(coords: &[Coords], y_true: &[f64], y_pred: &[f64]) -> String {
    let mut s = String::with_capacity(coords.len() * 64);
    s.push_str(PREDICTIONS_HEADER);
    s.push('\n');
    for ((c, y), p) in coords.iter().zip(y_true).zip(y_pred) {
        let _ = writeln!(s, "{},{},{},{},{}", c[0], c[1], c[2], y, p);
    }
    s
}

pub fn uncertainty_csv(coords: &[Coords], pred: &EnsemblePrediction) -> String {
    let mut s = String::with_capacity(coords.len() * 96);
    s.push_str(UNCERTAINTY_HEADER);
    s.push('\n');
    for (i, c) in coords.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            c[0], c[1], c[2], pred.mean[i], pred.total_var[i], pred.aleatoric_var[i], pred.epistemic_var[i]
        );
    }
    s
}

pub fn trials_jsonl(logs: &[TrialLog]) -> String {
    let mut s = String::new();
    for t in logs.iter().flat_map(|l| &l.trials) {
        s.push_str(&serde_json::to_string(t).expect("trial serializes"));
        s.push('\n');
    }
    s
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_rows_follow_header() {
        let coords = [[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]];
        let pred = EnsemblePrediction {
            mean: vec![1.0, 2.0],
            total_var: vec![0.5, 0.25],
            aleatoric_var: vec![0.25, 0.125],
            epistemic_var: vec![0.25, 0.125],
            members: 2,
        };
        let u = uncertainty_csv(&coords, &pred);
        let lines: Vec<&str> = u.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], UNCERTAINTY_HEADER);
        assert_eq!(lines[2], "1,2,3,2,0.25,0.125,0.125");
        let p = predictions_csv(&coords, &[1.5, 2.5], &[1.0, 2.0]);
        assert_eq!(p.lines().nth(1).unwrap(), "0.1,0.2,0.3,1.5,1");
    }
}
