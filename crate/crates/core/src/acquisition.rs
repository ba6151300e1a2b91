//! Monte-Carlo noisy expected improvement for minimization and its
//! maximization over the unit cube.
//!
//! For a candidate `x` and baseline set `B` the score is
//! `E[max(min_{b in B} f(b) - f(x), 0)]` under the joint GP posterior.
//! The baseline draws are shared across candidates scored by the same
//! [`NoisyEiScorer`], so comparisons between candidates use common random
//! numbers.

use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::gp::{psd_factor, GpError, GpModel};
use crate::linalg::{dot, Cholesky};
use crate::quasirand::SobolGenerator;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionEval {
    pub candidate: Vec<f64>,
    pub score: f64,
    pub n_mc_samples: usize,
}

/// Precomputed baseline posterior and shared normal draws.
#[derive(Debug, Clone)]
pub struct NoisyEiScorer<'a> {
    model: &'a GpModel,
    baseline: Vec<Vec<f64>>,
    baseline_solved: Vec<Vec<f64>>,
    baseline_factor: Cholesky,
    /// `n_samples x n_baseline` standard normal draws.
    z_baseline: Vec<Vec<f64>>,
    z_candidate: Vec<f64>,
    /// Per-sample minimum over the baseline draws.
    baseline_min: Vec<f64>,
}

impl<'a> NoisyEiScorer<'a> {
    pub fn new(model: &'a GpModel, baseline: &[Vec<f64>], n_samples: usize, seed: u64) -> Result<Self, GpError> {
        if baseline.is_empty() {
            return Err(GpError::EmptyCandidates);
        }
        let (means, cov) = model.joint_posterior(baseline)?;
        let factor = psd_factor(&cov, 1e-10, 1e-4).ok_or(GpError::Singular { max_jitter: 1e-4 })?;
        let baseline_solved = baseline.iter().map(|b| model.cholesky().solve_lower(&cross(model, b))).collect();
        let nb = baseline.len();
        let mut rng = rng::stream(seed, &[0xAC0]);
        let mut z_baseline = Vec::with_capacity(n_samples);
        let mut z_candidate = Vec::with_capacity(n_samples);
        let mut baseline_min = Vec::with_capacity(n_samples);
        let mut f = alloc::vec![0.0; nb];
        for _ in 0..n_samples {
            let z: Vec<f64> = (0..nb).map(|_| StandardNormal.sample(&mut rng)).collect();
            z_candidate.push(StandardNormal.sample(&mut rng));
            factor.mul_lower(&z, &mut f);
            let min = f.iter().zip(&means).map(|(a, m)| a + m).fold(f64::INFINITY, f64::min);
            baseline_min.push(min);
            z_baseline.push(z);
        }
        Ok(Self {
            model,
            baseline: baseline.to_vec(),
            baseline_solved,
            baseline_factor: factor,
            z_baseline,
            z_candidate,
            baseline_min,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.z_candidate.len()
    }

    /// Expected improvement of `candidate` (standardized units, >= 0).
    pub fn score(&self, candidate: &[f64]) -> Result<f64, GpError> {
        let model = self.model;
        let post = model.posterior(candidate)?;
        let k = cross(model, candidate);
        let v = model.cholesky().solve_lower(&k);
        let cov_cb: Vec<f64> = self
            .baseline
            .iter()
            .zip(&self.baseline_solved)
            .map(|(b, vb)| model.kernel(candidate, b) - dot(&v, vb))
            .collect();
        let l_cb = solve_lower_psd(&self.baseline_factor, &cov_cb);
        let l_cc = libm::sqrt((post.variance - dot(&l_cb, &l_cb)).max(0.0));
        let mut total = 0.0;
        for ((zb, zc), min) in self.z_baseline.iter().zip(&self.z_candidate).zip(&self.baseline_min) {
            let f = post.mean + dot(&l_cb, zb) + l_cc * zc;
            total += (min - f).max(0.0);
        }
        Ok(total / self.n_samples().max(1) as f64)
    }
}

fn cross(model: &GpModel, x: &[f64]) -> Vec<f64> {
    model.inputs().iter().map(|xi| model.kernel(xi, x)).collect()
}

/// Forward substitution that skips zero pivots (semi-definite factors).
fn solve_lower_psd(factor: &Cholesky, b: &[f64]) -> Vec<f64> {
    let l = factor.lower();
    let mut y = alloc::vec![0.0; b.len()];
    for i in 0..b.len() {
        let d = l.get(i, i);
        if d == 0.0 {
            continue;
        }
        let row = l.row(i);
        y[i] = (b[i] - dot(&row[..i], &y[..i])) / d;
    }
    y
}

/// Scores a single candidate against `baseline_points`.
pub fn qnei_score(
    model: &GpModel,
    candidate: &[f64],
    baseline_points: &[Vec<f64>],
    n_mc_samples: usize,
    seed: u64,
) -> Result<AcquisitionEval, GpError> {
    let scorer = NoisyEiScorer::new(model, baseline_points, n_mc_samples, seed)?;
    Ok(AcquisitionEval { candidate: candidate.to_vec(), score: scorer.score(candidate)?, n_mc_samples })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProposeOptions {
    pub n_raw: usize,
    pub n_refine: usize,
    pub n_mc_samples: usize,
    pub refine_steps: usize,
    pub initial_step: f64,
}

impl Default for ProposeOptions {
    fn default() -> Self {
        Self { n_raw: 512, n_refine: 4, n_mc_samples: 256, refine_steps: 32, initial_step: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub point: Vec<f64>,
    pub score: f64,
    /// Best score among the raw Sobol candidates, before refinement.
    pub raw_best_score: f64,
    /// Index of the raw candidate the proposal descends from.
    pub raw_index: usize,
}

/// Raw Sobol candidates for a proposal round. The `n`-candidate set is a
/// prefix of every larger set drawn with the same seed.
pub fn raw_candidates(dimension: usize, count: usize, seed: u64) -> Result<Vec<Vec<f64>>, crate::quasirand::SobolError> {
    let skip = 1 + rng::derive_seed(seed, &[0x50B0]) % 4096;
    SobolGenerator::new(dimension, skip)?.take_points(count)
}

/// Proposes the next point: Sobol sweep of raw candidates, then coordinate
/// hill-climbing from the `n_refine` best. Ties go to the lowest raw index.
pub fn propose_next(
    model: &GpModel,
    baseline_points: &[Vec<f64>],
    options: &ProposeOptions,
    seed: u64,
) -> Result<Proposal, GpError> {
    let dim = model.dimension();
    let scorer = NoisyEiScorer::new(model, baseline_points, options.n_mc_samples.max(1), seed)?;
    let raw = raw_candidates(dim, options.n_raw.max(1), seed)
        .map_err(|_| GpError::DimensionMismatch { expected: crate::quasirand::max_dimension(), got: dim })?;
    let mut scored = Vec::with_capacity(raw.len());
    for (i, c) in raw.iter().enumerate() {
        scored.push((i, scorer.score(c)?));
    }
    let mut order = scored.clone();
    // stable: equal scores keep ascending index
    order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal));
    let raw_best = order[0];

    let mut best = Proposal { point: raw[raw_best.0].clone(), score: raw_best.1, raw_best_score: raw_best.1, raw_index: raw_best.0 };
    for &(idx, score) in order.iter().take(options.n_refine) {
        let (point, refined) = hill_climb(&scorer, &raw[idx], score, options)?;
        if refined > best.score || (refined == best.score && idx < best.raw_index) {
            best = Proposal { point, score: refined, raw_best_score: raw_best.1, raw_index: idx };
        }
    }
    Ok(best)
}

fn hill_climb(
    scorer: &NoisyEiScorer<'_>,
    start: &[f64],
    start_score: f64,
    options: &ProposeOptions,
) -> Result<(Vec<f64>, f64), GpError> {
    let mut x = start.to_vec();
    let mut fx = start_score;
    let mut step = options.initial_step;
    let mut trial = x.clone();
    for _ in 0..options.refine_steps {
        let mut best_move: Option<(usize, f64, f64)> = None;
        for d in 0..x.len() {
            for dir in [-1.0, 1.0] {
                let v = (x[d] + dir * step).clamp(0.0, 1.0);
                if v == x[d] {
                    continue;
                }
                trial.copy_from_slice(&x);
                trial[d] = v;
                let s = scorer.score(&trial)?;
                if s > best_move.map_or(fx, |m| m.2) {
                    best_move = Some((d, v, s));
                }
            }
        }
        match best_move {
            Some((d, v, s)) => {
                x[d] = v;
                fx = s;
            }
            None => step *= 0.5,
        }
    }
    Ok((x, fx))
}
