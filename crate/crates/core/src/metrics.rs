//! Scalar accuracy and calibration metrics, all in raw target units.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensemble::EnsemblePrediction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("metric needs at least one point")]
    Empty,
    #[error("length mismatch: {targets} targets vs {predictions} predictions")]
    LengthMismatch { targets: usize, predictions: usize },
    #[error("targets have zero variance; R^2 is undefined")]
    ConstantTargets,
    #[error("nominal coverage {0} is outside (0, 1)")]
    InvalidNominal(f64),
}

fn check(y: &[f64], mu: &[f64]) -> Result<(), MetricError> {
    if y.len() != mu.len() {
        return Err(MetricError::LengthMismatch { targets: y.len(), predictions: mu.len() });
    }
    if y.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

fn sum_squared_error(y: &[f64], mu: &[f64]) -> f64 {
    y.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum()
}

pub fn rmse(y: &[f64], mu: &[f64]) -> Result<f64, MetricError> {
    check(y, mu)?;
    Ok(libm::sqrt(sum_squared_error(y, mu) / y.len() as f64))
}

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r_squared(y: &[f64], mu: &[f64]) -> Result<f64, MetricError> {
    check(y, mu)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ConstantTargets);
    }
    Ok(1.0 - sum_squared_error(y, mu) / ss_tot)
}

/// Half-width, in standard deviations, of the central Gaussian interval with
/// probability `nominal`.
pub fn gaussian_quantile(nominal: f64) -> Result<f64, MetricError> {
    if !(nominal > 0.0 && nominal < 1.0) {
        return Err(MetricError::InvalidNominal(nominal));
    }
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if libm::erf(mid / core::f64::consts::SQRT_2) < nominal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Fraction of points with `|y - mean| <= z(nominal) * sqrt(total_var)`.
pub fn coverage(y: &[f64], pred: &EnsemblePrediction, nominal: f64) -> Result<f64, MetricError> {
    check(y, &pred.mean)?;
    let z = gaussian_quantile(nominal)?;
    let inside = y
        .iter()
        .zip(&pred.mean)
        .zip(&pred.total_var)
        .filter(|((t, m), v)| libm::fabs(*t - *m) <= z * libm::sqrt(**v))
        .count();
    Ok(inside as f64 / y.len() as f64)
}

/// Mean Gaussian negative log-likelihood per point, including the
/// `ln(2 pi) / 2` constant.
pub fn mean_nll(y: &[f64], mean: &[f64], variance: &[f64]) -> Result<f64, MetricError> {
    check(y, mean)?;
    check(y, variance)?;
    let half_log_2pi = 0.5 * libm::log(2.0 * core::f64::consts::PI);
    let total: f64 = y
        .iter()
        .zip(mean)
        .zip(variance)
        .map(|((t, m), v)| (t - m) * (t - m) / (2.0 * v) + 0.5 * libm::log(*v) + half_log_2pi)
        .sum();
    Ok(total / y.len() as f64)
}

/// Domain statistics of predicted standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintySummary {
    pub mean_total_std: f64,
    pub max_total_std: f64,
    pub mean_aleatoric_std: f64,
    pub max_aleatoric_std: f64,
    pub mean_epistemic_std: f64,
    pub max_epistemic_std: f64,
}

impl UncertaintySummary {
    pub fn of(pred: &EnsemblePrediction) -> Result<Self, MetricError> {
        if pred.mean.is_empty() {
            return Err(MetricError::Empty);
        }
        let stats = |v: &[f64]| {
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for s in v.iter().map(|x| libm::sqrt(x.max(0.0))) {
                sum += s;
                max = max.max(s);
            }
            (sum / v.len() as f64, max)
        };
        let (mean_total_std, max_total_std) = stats(&pred.total_var);
        let (mean_aleatoric_std, max_aleatoric_std) = stats(&pred.aleatoric_var);
        let (mean_epistemic_std, max_epistemic_std) = stats(&pred.epistemic_var);
        Ok(Self {
            mean_total_std,
            max_total_std,
            mean_aleatoric_std,
            max_aleatoric_std,
            mean_epistemic_std,
            max_epistemic_std,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: alloc::string::String,
    pub points: usize,
    pub rmse: f64,
    pub r2: f64,
    pub mean_nll: f64,
    pub coverage_68: f64,
    pub coverage_95: f64,
    pub uncertainty: UncertaintySummary,
}

impl MetricReport {
    pub fn compute(split: &str, y: &[f64], pred: &EnsemblePrediction) -> Result<Self, MetricError> {
        Ok(Self {
            split: split.into(),
            points: y.len(),
            rmse: rmse(y, &pred.mean)?,
            r2: r_squared(y, &pred.mean)?,
            mean_nll: mean_nll(y, &pred.mean, &pred.total_var)?,
            coverage_68: coverage(y, pred, 0.68)?,
            coverage_95: coverage(y, pred, 0.95)?,
            uncertainty: UncertaintySummary::of(pred)?,
        })
    }
}
