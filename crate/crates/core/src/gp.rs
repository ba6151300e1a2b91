//! Gaussian-process surrogate over the unit hypercube.
//!
//! Squared-exponential kernel with per-dimension lengthscales. Targets are
//! standardized inside the model; all posterior quantities are reported in
//! standardized units with accessors that map back to raw objective units.
//! Kernel hyperparameters maximize the log marginal likelihood with a
//! seeded multi-start coordinate search in log space.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::linalg::{dot, Cholesky, SquareMatrix};
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("point dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("at least {min} observations are required to fit a GP, got {got}")]
    TooFewObservations { min: usize, got: usize },
    #[error("observation {index} is outside the unit cube or non-finite")]
    InvalidObservation { index: usize },
    #[error("kernel matrix is not positive definite even with jitter {max_jitter:e}")]
    Singular { max_jitter: f64 },
    #[error("candidate set is empty")]
    EmptyCandidates,
}

/// Search box for hyperparameter fitting (standardized target units).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperparameterBounds {
    pub lengthscale: (f64, f64),
    pub signal_variance: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl Default for HyperparameterBounds {
    fn default() -> Self {
        Self { lengthscale: (0.01, 10.0), signal_variance: (0.05, 20.0), noise_variance: (1e-6, 1.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub jitter_start: f64,
    pub jitter_max: f64,
    pub bounds: HyperparameterBounds,
    /// Coordinate search stops when the log-space step falls below this.
    pub min_step: f64,
    pub max_sweeps: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 8,
            seed: 0,
            jitter_start: 1e-10,
            jitter_max: 1e-4,
            bounds: HyperparameterBounds::default(),
            min_step: 1e-3,
            max_sweeps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpHyperparameters {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

/// Squared-exponential kernel `s * exp(-sum_d (x_d - y_d)^2 / (2 l_d^2))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], lengthscales: &[f64], signal_variance: f64) -> Result<f64, GpError> {
    if x.len() != y.len() {
        return Err(GpError::DimensionMismatch { expected: x.len(), got: y.len() });
    }
    if lengthscales.len() != x.len() {
        return Err(GpError::DimensionMismatch { expected: x.len(), got: lengthscales.len() });
    }
    Ok(rbf_unchecked(x, y, lengthscales, signal_variance))
}

#[inline]
fn rbf_unchecked(x: &[f64], y: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let mut r2 = 0.0;
    for ((a, b), l) in x.iter().zip(y).zip(lengthscales) {
        let d = (a - b) / l;
        r2 += d * d;
    }
    signal_variance * libm::exp(-0.5 * r2)
}

/// Posterior of the latent objective at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorBelief {
    /// Standardized mean.
    pub mean: f64,
    /// Standardized variance, clamped at zero.
    pub variance: f64,
    offset: f64,
    scale: f64,
}

impl PosteriorBelief {
    pub fn raw_mean(&self) -> f64 {
        self.mean * self.scale + self.offset
    }

    pub fn raw_variance(&self) -> f64 {
        self.variance * self.scale * self.scale
    }

    pub fn std_dev(&self) -> f64 {
        libm::sqrt(self.variance)
    }
}

/// Fitted GP state. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    hyper: GpHyperparameters,
    target_mean: f64,
    target_std: f64,
    cholesky: Cholesky,
    alpha: Vec<f64>,
    jitter: f64,
    log_marginal_likelihood: f64,
}

impl GpModel {
    /// Conditions a GP with fixed hyperparameters on raw observations.
    pub fn with_hyperparameters(
        observations: &[(Vec<f64>, f64)],
        hyper: GpHyperparameters,
        jitter_start: f64,
        jitter_max: f64,
    ) -> Result<Self, GpError> {
        let (inputs, targets, mean, std) = standardize(observations, 1)?;
        let dim = inputs[0].len();
        if hyper.lengthscales.len() != dim {
            return Err(GpError::DimensionMismatch { expected: dim, got: hyper.lengthscales.len() });
        }
        condition(inputs, targets, mean, std, hyper, jitter_start, jitter_max)
    }

    pub fn dimension(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// Standardized training targets.
    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn hyperparameters(&self) -> &GpHyperparameters {
        &self.hyper
    }

    pub fn target_mean(&self) -> f64 {
        self.target_mean
    }

    pub fn target_std(&self) -> f64 {
        self.target_std
    }

    /// Jitter added to the diagonal to obtain the cached factor.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.cholesky
    }

    /// Raw objective value -> standardized units.
    pub fn standardize(&self, raw: f64) -> f64 {
        (raw - self.target_mean) / self.target_std
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        rbf_unchecked(x, y, &self.hyper.lengthscales, self.hyper.signal_variance)
    }

    fn cross_covariance(&self, x: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|xi| self.kernel(xi, x)).collect()
    }

    fn belief(&self, mean: f64, variance: f64) -> PosteriorBelief {
        PosteriorBelief { mean, variance: variance.max(0.0), offset: self.target_mean, scale: self.target_std }
    }

    pub fn posterior(&self, x: &[f64]) -> Result<PosteriorBelief, GpError> {
        if x.len() != self.dimension() {
            return Err(GpError::DimensionMismatch { expected: self.dimension(), got: x.len() });
        }
        let k = self.cross_covariance(x);
        let mean = dot(&k, &self.alpha);
        let v = self.cholesky.solve_lower(&k);
        let variance = self.hyper.signal_variance - dot(&v, &v);
        Ok(self.belief(mean, variance))
    }

    /// Joint posterior mean and covariance (standardized) over `points`.
    pub fn joint_posterior(&self, points: &[Vec<f64>]) -> Result<(Vec<f64>, SquareMatrix), GpError> {
        let m = points.len();
        if m == 0 {
            return Err(GpError::EmptyCandidates);
        }
        let mut means = Vec::with_capacity(m);
        let mut solved = Vec::with_capacity(m);
        for p in points {
            if p.len() != self.dimension() {
                return Err(GpError::DimensionMismatch { expected: self.dimension(), got: p.len() });
            }
            let k = self.cross_covariance(p);
            means.push(dot(&k, &self.alpha));
            solved.push(self.cholesky.solve_lower(&k));
        }
        let cov = SquareMatrix::from_fn(m, |i, j| self.kernel(&points[i], &points[j]) - dot(&solved[i], &solved[j]));
        Ok((means, cov))
    }

    /// Draws `n_samples` joint posterior samples (standardized units) over
    /// `candidates`; row `s` holds one joint draw, column `j` candidate `j`.
    pub fn joint_posterior_samples(
        &self,
        candidates: &[Vec<f64>],
        n_samples: usize,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>, GpError> {
        let (means, cov) = self.joint_posterior(candidates)?;
        let factor = psd_factor(&cov, 1e-10, 1e-4).ok_or(GpError::Singular { max_jitter: 1e-4 })?;
        let m = candidates.len();
        let mut rng = rng::stream(seed, &[0x6A01]);
        let mut z = alloc::vec![0.0; m];
        let mut out = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            for zi in z.iter_mut() {
                *zi = StandardNormal.sample(&mut rng);
            }
            let mut row = alloc::vec![0.0; m];
            factor.mul_lower(&z, &mut row);
            for (r, mu) in row.iter_mut().zip(&means) {
                *r += mu;
            }
            out.push(row);
        }
        Ok(out)
    }
}

/// Cholesky-like factor of a positive semi-definite matrix: pivots that
/// vanish (relative to the diagonal scale) give zero columns instead of
/// failing. Falls back to diagonal jitter when a pivot is clearly negative.
pub(crate) fn psd_factor(cov: &SquareMatrix, jitter_start: f64, jitter_max: f64) -> Option<Cholesky> {
    let n = cov.size();
    let scale = (0..n).map(|i| cov.get(i, i).abs()).fold(0.0, f64::max).max(1e-300);
    let tol = 1e-12 * scale;
    let mut jitter = 0.0;
    loop {
        let mut l = SquareMatrix::zeros(n);
        let mut ok = true;
        for j in 0..n {
            let mut d = cov.get(j, j) + jitter;
            for k in 0..j {
                let v = l.get(j, k);
                d -= v * v;
            }
            if !d.is_finite() || d < -1e-8 * scale {
                ok = false;
                break;
            }
            if d <= tol {
                continue;
            }
            let djj = libm::sqrt(d);
            l.set(j, j, djj);
            for i in (j + 1)..n {
                let mut s = cov.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        if ok {
            return Some(Cholesky::from_lower(l));
        }
        jitter = if jitter == 0.0 { jitter_start } else { jitter * 10.0 };
        if jitter > jitter_max * (1.0 + 1e-12) {
            return None;
        }
    }
}

/// Inputs, standardized targets, target mean, target std.
type Standardized = (Vec<Vec<f64>>, Vec<f64>, f64, f64);

fn standardize(observations: &[(Vec<f64>, f64)], min: usize) -> Result<Standardized, GpError> {
    if observations.len() < min || observations.is_empty() {
        return Err(GpError::TooFewObservations { min: min.max(1), got: observations.len() });
    }
    let dim = observations[0].0.len();
    for (index, (x, y)) in observations.iter().enumerate() {
        if x.len() != dim {
            return Err(GpError::DimensionMismatch { expected: dim, got: x.len() });
        }
        if !y.is_finite() || x.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(GpError::InvalidObservation { index });
        }
    }
    let n = observations.len() as f64;
    let mean = observations.iter().map(|o| o.1).sum::<f64>() / n;
    let var = observations.iter().map(|o| (o.1 - mean) * (o.1 - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { libm::sqrt(var) } else { 1.0 };
    let inputs = observations.iter().map(|o| o.0.clone()).collect();
    let targets = observations.iter().map(|o| (o.1 - mean) / std).collect();
    Ok((inputs, targets, mean, std))
}

fn kernel_matrix(inputs: &[Vec<f64>], hyper: &GpHyperparameters) -> SquareMatrix {
    let n = inputs.len();
    let mut k = SquareMatrix::zeros(n);
    for i in 0..n {
        k.set(i, i, hyper.signal_variance + hyper.noise_variance);
        for j in 0..i {
            let v = rbf_unchecked(&inputs[i], &inputs[j], &hyper.lengthscales, hyper.signal_variance);
            k.set(i, j, v);
            k.set(j, i, v);
        }
    }
    k
}

fn condition(
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    target_mean: f64,
    target_std: f64,
    hyper: GpHyperparameters,
    jitter_start: f64,
    jitter_max: f64,
) -> Result<GpModel, GpError> {
    let k = kernel_matrix(&inputs, &hyper);
    let (cholesky, jitter) =
        Cholesky::factor_with_jitter(&k, jitter_start, jitter_max).ok_or(GpError::Singular { max_jitter: jitter_max })?;
    let alpha = cholesky.solve(&targets);
    let lml = -0.5 * dot(&targets, &alpha) - 0.5 * cholesky.log_det() - 0.5 * targets.len() as f64 * LN_2PI;
    Ok(GpModel { inputs, targets, hyper, target_mean, target_std, cholesky, alpha, jitter, log_marginal_likelihood: lml })
}

/// Log marginal likelihood of standardized targets under `hyper`;
/// `None` when the kernel matrix cannot be factored.
pub fn log_marginal_likelihood(
    inputs: &[Vec<f64>],
    targets: &[f64],
    hyper: &GpHyperparameters,
    jitter_start: f64,
    jitter_max: f64,
) -> Option<f64> {
    let k = kernel_matrix(inputs, hyper);
    let (c, _) = Cholesky::factor_with_jitter(&k, jitter_start, jitter_max)?;
    let alpha = c.solve(targets);
    Some(-0.5 * dot(targets, &alpha) - 0.5 * c.log_det() - 0.5 * targets.len() as f64 * LN_2PI)
}

/// Result of one multi-start hyperparameter search, exposed for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Log marginal likelihood at each start point (−∞ when unfactorable).
    pub start_values: Vec<f64>,
    /// Best log marginal likelihood reached from each start.
    pub final_values: Vec<f64>,
}

/// Fits kernel hyperparameters by maximizing the log marginal likelihood
/// and returns the conditioned model.
pub fn fit_gp(observations: &[(Vec<f64>, f64)], options: &FitOptions) -> Result<GpModel, GpError> {
    fit_gp_with_report(observations, options).map(|(m, _)| m)
}

pub fn fit_gp_with_report(
    observations: &[(Vec<f64>, f64)],
    options: &FitOptions,
) -> Result<(GpModel, FitReport), GpError> {
    let (inputs, targets, mean, std) = standardize(observations, 2)?;
    let dim = inputs[0].len();
    let b = options.bounds;
    let mut lower = alloc::vec![libm::log(b.lengthscale.0); dim];
    let mut upper = alloc::vec![libm::log(b.lengthscale.1); dim];
    lower.push(libm::log(b.signal_variance.0));
    upper.push(libm::log(b.signal_variance.1));
    lower.push(libm::log(b.noise_variance.0));
    upper.push(libm::log(b.noise_variance.1));

    let to_hyper = |theta: &[f64]| GpHyperparameters {
        lengthscales: theta[..dim].iter().map(|v| libm::exp(*v)).collect(),
        signal_variance: libm::exp(theta[dim]),
        noise_variance: libm::exp(theta[dim + 1]),
    };
    let objective = |theta: &[f64]| {
        log_marginal_likelihood(&inputs, &targets, &to_hyper(theta), options.jitter_start, options.jitter_max)
            .filter(|v| v.is_finite())
            .unwrap_or(f64::NEG_INFINITY)
    };

    let mut rng = rng::stream(options.seed, &[0x6F17]);
    let restarts = options.restarts.max(1);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut report = FitReport { start_values: Vec::new(), final_values: Vec::new() };
    for r in 0..restarts {
        let mut theta: Vec<f64> = if r == 0 {
            // lengthscale 0.5, unit signal, small noise
            let mut t = alloc::vec![libm::log(0.5); dim];
            t.push(0.0);
            t.push(libm::log(1e-2));
            t
        } else {
            lower.iter().zip(&upper).map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>()).collect()
        };
        for (t, (lo, hi)) in theta.iter_mut().zip(lower.iter().zip(&upper)) {
            *t = t.clamp(*lo, *hi);
        }
        let start = objective(&theta);
        report.start_values.push(start);
        let value = coordinate_ascent(&mut theta, start, &lower, &upper, options, &objective);
        report.final_values.push(value);
        if best.as_ref().map_or(true, |(v, _)| value > *v) {
            best = Some((value, theta));
        }
    }
    let (_, theta) = best.expect("at least one restart");
    let model = condition(inputs, targets, mean, std, to_hyper(&theta), options.jitter_start, options.jitter_max)?;
    Ok((model, report))
}

fn coordinate_ascent(
    theta: &mut [f64],
    mut value: f64,
    lower: &[f64],
    upper: &[f64],
    options: &FitOptions,
    objective: &impl Fn(&[f64]) -> f64,
) -> f64 {
    let mut step = 1.0;
    for _ in 0..options.max_sweeps {
        if step < options.min_step {
            break;
        }
        let mut improved = false;
        for i in 0..theta.len() {
            let original = theta[i];
            let mut best_here = (value, original);
            for dir in [-1.0, 1.0] {
                let candidate = (original + dir * step).clamp(lower[i], upper[i]);
                if candidate == original {
                    continue;
                }
                theta[i] = candidate;
                let v = objective(theta);
                if v > best_here.0 {
                    best_here = (v, candidate);
                }
            }
            theta[i] = best_here.1;
            if best_here.0 > value {
                value = best_here.0;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    value
}
