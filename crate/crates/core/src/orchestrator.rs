//! Per-member Bayesian optimization over the hyperparameter cube, and the
//! full optimized-ensemble run built from independent member searches.
//!
//! Each member starts with `n_sobol` Sobol trials (skip `1 + member * n_sobol`)
//! and then runs `n_bo` rounds of GP fit -> noisy-EI proposal -> evaluation.
//! The GP is refit on the whole finite trial history every round; failed
//! trials are kept in the log with RMSE `+inf` but never reach the GP.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{propose_next, ProposeOptions};
use crate::ensemble::{self, EnsembleError, MemberData, MemberRunner, TrainedMember};
use crate::gp::{fit_gp, FitOptions};
use crate::hyperspace::{self, HyperConfig};
use crate::nn::{self, SampleSet, TargetNoise};
use crate::quasirand::{SobolError, SobolGenerator};
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoError {
    #[error("need at least 2 Sobol trials, got {0}")]
    TooFewSobol(usize),
    #[error("member {member}: every one of {trials} trials failed")]
    AllTrialsFailed { member: usize, trials: usize },
    #[error(transparent)]
    Sobol(#[from] SobolError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sobol,
    Bo,
}

/// Result of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    /// Validation RMSE; any non-finite value marks a failed trial.
    pub rmse: f64,
    pub wall_time_s: f64,
}

/// Maps a configuration to its validation RMSE.
pub trait Objective {
    fn evaluate(&self, config: &HyperConfig, seed: u64) -> Evaluation;
}

impl<F: Fn(&HyperConfig, u64) -> f64> Objective for F {
    fn evaluate(&self, config: &HyperConfig, seed: u64) -> Evaluation {
        Evaluation { rmse: self(config, seed), wall_time_s: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub member: usize,
    pub iter: usize,
    pub phase: Phase,
    pub point: Vec<f64>,
    pub config: HyperConfig,
    /// `+inf` for failed trials; serialized as null.
    #[serde(with = "finite_or_null")]
    pub rmse: f64,
    pub wall_time_s: f64,
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLog {
    pub member: usize,
    pub n_sobol: usize,
    pub n_bo: usize,
    pub trials: Vec<Trial>,
}

impl TrialLog {
    pub fn n_total(&self) -> usize {
        self.n_sobol + self.n_bo
    }

    /// Best RMSE seen up to and including each trial.
    pub fn running_min(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.trials
            .iter()
            .map(|t| {
                if t.rmse < best {
                    best = t.rmse;
                }
                best
            })
            .collect()
    }

    pub fn best(&self) -> Option<&Trial> {
        // first occurrence wins ties
        self.trials.iter().filter(|t| t.rmse.is_finite()).fold(None, |acc: Option<&Trial>, t| match acc {
            Some(b) if b.rmse <= t.rmse => Some(b),
            _ => Some(t),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoBudget {
    pub n_sobol: usize,
    pub n_bo: usize,
    pub epochs_per_trial: usize,
    pub propose: ProposeOptions,
    pub gp_restarts: usize,
}

impl Default for BoBudget {
    fn default() -> Self {
        Self { n_sobol: 8, n_bo: 22, epochs_per_trial: 60, propose: ProposeOptions::default(), gp_restarts: 8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemberBoResult {
    pub best: HyperConfig,
    pub best_rmse: f64,
    pub log: TrialLog,
}

/// Sobol skip offset for a member's initial design.
pub fn member_skip(member: usize, n_sobol: usize) -> u64 {
    1 + (member * n_sobol) as u64
}

/// Seed used to train every trial of one member, so configurations are
/// compared under common initialization and shuffling.
pub fn trial_seed(member_seed: u64) -> u64 {
    rng::derive_seed(member_seed, &[0x7121])
}

fn finish(log: TrialLog) -> Result<MemberBoResult, BoError> {
    let best = log
        .best()
        .cloned()
        .ok_or(BoError::AllTrialsFailed { member: log.member, trials: log.trials.len() })?;
    Ok(MemberBoResult { best: best.config, best_rmse: best.rmse, log })
}

/// One member's two-phase search.
pub fn run_member_bo(
    objective: &impl Objective,
    member: usize,
    member_seed: u64,
    budget: &BoBudget,
) -> Result<MemberBoResult, BoError> {
    if budget.n_sobol < 2 {
        return Err(BoError::TooFewSobol(budget.n_sobol));
    }
    let mut sobol = SobolGenerator::new(hyperspace::DIMENSION, member_skip(member, budget.n_sobol))?;
    let seed = trial_seed(member_seed);
    let mut log = TrialLog { member, n_sobol: budget.n_sobol, n_bo: budget.n_bo, trials: Vec::with_capacity(budget.n_sobol + budget.n_bo) };
    let record = |log: &mut TrialLog, phase: Phase, point: Vec<f64>| {
        let config = hyperspace::decode(&point).expect("points stay inside the unit cube");
        let eval = objective.evaluate(&config, seed);
        let rmse = if eval.rmse.is_finite() { eval.rmse } else { f64::INFINITY };
        let iter = log.trials.len();
        log.trials.push(Trial { member, iter, phase, point, config, rmse, wall_time_s: eval.wall_time_s });
    };

    for _ in 0..budget.n_sobol {
        let p = sobol.next_point()?;
        record(&mut log, Phase::Sobol, p);
    }
    for _ in 0..budget.n_bo {
        let iter = log.trials.len() as u64;
        let observations: Vec<(Vec<f64>, f64)> =
            log.trials.iter().filter(|t| t.rmse.is_finite()).map(|t| (t.point.clone(), t.rmse)).collect();
        let proposal = if observations.len() >= 2 {
            let fit = FitOptions { restarts: budget.gp_restarts, seed: rng::derive_seed(member_seed, &[0x6B, iter]), ..FitOptions::default() };
            fit_gp(&observations, &fit).ok().and_then(|model| {
                let baseline: Vec<Vec<f64>> = observations.iter().map(|o| o.0.clone()).collect();
                propose_next(&model, &baseline, &budget.propose, rng::derive_seed(member_seed, &[0xAC, iter])).ok()
            })
        } else {
            None
        };
        // too few usable observations or a surrogate failure: keep exploring
        let point = match proposal {
            Some(p) => p.point,
            None => sobol.next_point()?,
        };
        record(&mut log, Phase::Bo, point);
    }
    finish(log)
}

/// Pure quasi-random search with the same total budget and initial design.
pub fn run_sobol_search(objective: &impl Objective, member: usize, member_seed: u64, budget: &BoBudget) -> Result<MemberBoResult, BoError> {
    let mut sobol = SobolGenerator::new(hyperspace::DIMENSION, member_skip(member, budget.n_sobol))?;
    let seed = trial_seed(member_seed);
    let n_total = budget.n_sobol + budget.n_bo;
    let mut log = TrialLog { member, n_sobol: n_total, n_bo: 0, trials: Vec::with_capacity(n_total) };
    for iter in 0..n_total {
        let point = sobol.next_point()?;
        let config = hyperspace::decode(&point).expect("points stay inside the unit cube");
        let eval = objective.evaluate(&config, seed);
        let rmse = if eval.rmse.is_finite() { eval.rmse } else { f64::INFINITY };
        log.trials.push(Trial { member, iter, phase: Phase::Sobol, point, config, rmse, wall_time_s: eval.wall_time_s });
    }
    finish(log)
}

/// Trains on the optimization-train split and scores RMSE on the
/// optimization-validation split.
#[derive(Clone, Copy)]
pub struct NetworkObjective<'a> {
    pub train: &'a SampleSet,
    pub validation: &'a SampleSet,
    pub epochs: usize,
    pub width_divisor: usize,
    pub noise: Option<&'a (dyn TargetNoise + Sync)>,
}

impl Objective for NetworkObjective<'_> {
    fn evaluate(&self, config: &HyperConfig, seed: u64) -> Evaluation {
        let data = MemberData { train: self.train, validation: None, noise: self.noise, width_divisor: self.width_divisor };
        let rmse = ensemble::train_member(data, &config.training(), self.epochs, seed)
            .and_then(|m| Ok(m.model.predict_set(self.validation)?))
            .map(|p| {
                let sse: f64 = p.mean.iter().zip(&self.validation.targets).map(|(a, b)| (a - b) * (a - b)).sum();
                libm::sqrt(sse / self.validation.len().max(1) as f64)
            })
            .unwrap_or(f64::INFINITY);
        Evaluation { rmse, wall_time_s: 0.0 }
    }
}

/// Splits an optimized-ensemble run needs. The held-out test split is
/// deliberately absent.
#[derive(Clone, Copy)]
pub struct BodeData<'a> {
    pub bo_train: &'a SampleSet,
    pub bo_val: &'a SampleSet,
    pub train: &'a SampleSet,
    pub validation: Option<&'a SampleSet>,
    pub noise: Option<&'a (dyn TargetNoise + Sync)>,
    pub width_divisor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodeRun {
    pub searches: Vec<MemberBoResult>,
    pub members: Vec<TrainedMember>,
}

pub fn member_seed(master_seed: u64, member: usize) -> u64 {
    rng::derive_seed(master_seed, &[0xB0DE, member as u64])
}

pub fn final_seed(member_seed: u64) -> u64 {
    rng::derive_seed(member_seed, &[0xF1])
}

/// Runs `n_members` independent searches and trains each winner for
/// `final_epochs` on the full training split. `wrap` lets callers decorate
/// the per-trial objective (for timing, logging); pass `|o| o` otherwise.
pub fn run_bode<'a, O: Objective>(
    data: BodeData<'a>,
    n_members: usize,
    budget: &BoBudget,
    final_epochs: usize,
    master_seed: u64,
    runner: &impl MemberRunner,
    wrap: impl Fn(NetworkObjective<'a>) -> O + Sync + Send,
) -> Result<BodeRun, BoError> {
    let objective = NetworkObjective {
        train: data.bo_train,
        validation: data.bo_val,
        epochs: budget.epochs_per_trial,
        width_divisor: data.width_divisor,
        noise: data.noise,
    };
    let searches: Vec<MemberBoResult> = runner
        .run(n_members, |m| run_member_bo(&wrap(objective), m, member_seed(master_seed, m), budget))
        .into_iter()
        .collect::<Result<_, _>>()?;
    let configs: Vec<HyperConfig> = searches.iter().map(|s| s.best.clone()).collect();
    let seeds: Vec<u64> = (0..n_members).map(|m| final_seed(member_seed(master_seed, m))).collect();
    let member_data = MemberData { train: data.train, validation: data.validation, noise: data.noise, width_divisor: data.width_divisor };
    let members = ensemble::train_bode_ensemble(member_data, &configs, &seeds, final_epochs, runner)?;
    Ok(BodeRun { searches, members })
}

/// Convenience for callers that only need RMSE of a trained model.
pub fn validation_rmse(model: &nn::TrainedModel, set: &SampleSet) -> Option<f64> {
    let p = model.predict_set(set).ok()?;
    let sse: f64 = p.mean.iter().zip(&set.targets).map(|(a, b)| (a - b) * (a - b)).sum();
    Some(libm::sqrt(sse / set.len().max(1) as f64))
}
