//! Ensemble aggregation, the total/aleatoric/epistemic split, and member
//! training for the baseline and optimized ensembles.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hyperspace::{BaselineConfig, HyperConfig, TrainingConfig};
use crate::nn::{self, DenseNetSpec, EpochRecord, MemberPrediction, SampleSet, TargetNoise, TrainError, TrainOptions, TrainedModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("an ensemble needs at least 2 members, got {0}")]
    TooFewMembers(usize),
    #[error("member {member} predicts {got} points, expected {expected}")]
    RaggedMembers { member: usize, expected: usize, got: usize },
    #[error("member {member} has a non-positive variance at point {point}")]
    NonPositiveVariance { member: usize, point: usize },
    #[error("{configs} configs but {seeds} seeds")]
    LengthMismatch { configs: usize, seeds: usize },
    #[error("member {member} failed to train: {source}")]
    Training { member: usize, source: TrainError },
}

/// Aggregated prediction over M members.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnsemblePrediction {
    pub mean: Vec<f64>,
    pub total_var: Vec<f64>,
    pub aleatoric_var: Vec<f64>,
    pub epistemic_var: Vec<f64>,
    pub members: usize,
}

impl EnsemblePrediction {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }
}

/// Mean of the member means, aleatoric = mean member variance, epistemic =
/// spread of the member means, total = aleatoric + epistemic.
///
/// The spread is accumulated around the mean rather than as
/// `E[mu^2] - E[mu]^2`, which is the same quantity without the cancellation.
pub fn aggregate(members: &[MemberPrediction]) -> Result<EnsemblePrediction, EnsembleError> {
    let m = members.len();
    if m < 2 {
        return Err(EnsembleError::TooFewMembers(m));
    }
    let n = members[0].mean.len();
    for (i, p) in members.iter().enumerate() {
        for len in [p.mean.len(), p.variance.len()] {
            if len != n {
                return Err(EnsembleError::RaggedMembers { member: i, expected: n, got: len });
            }
        }
        if let Some(point) = p.variance.iter().position(|v| !(*v > 0.0)) {
            return Err(EnsembleError::NonPositiveVariance { member: i, point });
        }
    }
    let inv = 1.0 / m as f64;
    let mut out = EnsemblePrediction {
        mean: Vec::with_capacity(n),
        total_var: Vec::with_capacity(n),
        aleatoric_var: Vec::with_capacity(n),
        epistemic_var: Vec::with_capacity(n),
        members: m,
    };
    for j in 0..n {
        let mut mu = members.iter().map(|p| p.mean[j]).sum::<f64>() * inv;
        // one refinement pass; makes identical members reproduce their mean exactly
        mu += members.iter().map(|p| p.mean[j] - mu).sum::<f64>() * inv;
        let alea = members.iter().map(|p| p.variance[j]).sum::<f64>() * inv;
        let epis = members.iter().map(|p| (p.mean[j] - mu) * (p.mean[j] - mu)).sum::<f64>() * inv;
        out.mean.push(mu);
        out.aleatoric_var.push(alea);
        out.epistemic_var.push(epis);
        out.total_var.push(alea + epis);
    }
    Ok(out)
}

/// Runs `n` independent jobs. Implementations may run them concurrently but
/// must return results in index order.
pub trait MemberRunner {
    fn run<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl MemberRunner for Sequential {
    fn run<T, F>(&self, n: usize, job: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(job).collect()
    }
}

/// Training data and shared knobs for a set of members.
#[derive(Clone, Copy)]
pub struct MemberData<'a> {
    pub train: &'a SampleSet,
    pub validation: Option<&'a SampleSet>,
    pub noise: Option<&'a (dyn TargetNoise + Sync)>,
    /// Channel-width divisor applied to every member network.
    pub width_divisor: usize,
}

impl core::fmt::Debug for MemberData<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("MemberData")
            .field("train", &self.train.len())
            .field("validation", &self.validation.map(SampleSet::len))
            .field("noisy", &self.noise.is_some())
            .field("width_divisor", &self.width_divisor)
            .finish()
    }
}

/// One trained member with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedMember {
    pub config: TrainingConfig,
    pub seed: u64,
    pub epochs: usize,
    pub model: TrainedModel,
    pub trace: Vec<EpochRecord>,
}

pub fn train_member(data: MemberData<'_>, config: &TrainingConfig, epochs: usize, seed: u64) -> Result<TrainedMember, TrainError> {
    let spec = DenseNetSpec::from_training(data.train.dim, config, data.width_divisor);
    let options = TrainOptions::from_config(config, epochs, seed);
    let outcome = nn::train(spec, data.train, data.validation, &options, data.noise.map(|n| n as &dyn TargetNoise))?;
    Ok(TrainedMember { config: config.clone(), seed, epochs, trace: outcome.trace.clone(), model: outcome.into_model() })
}

fn collect(results: Vec<Result<TrainedMember, TrainError>>) -> Result<Vec<TrainedMember>, EnsembleError> {
    results
        .into_iter()
        .enumerate()
        .map(|(member, r)| r.map_err(|source| EnsembleError::Training { member, source }))
        .collect()
}

/// Every member uses the hand-tuned configuration; only the seed differs.
pub fn train_baseline_ensemble(
    data: MemberData<'_>,
    baseline: &BaselineConfig,
    seeds: &[u64],
    runner: &impl MemberRunner,
) -> Result<Vec<TrainedMember>, EnsembleError> {
    let cfg = baseline.training();
    collect(runner.run(seeds.len(), |i| train_member(data, &cfg, baseline.epochs, seeds[i])))
}

/// Member `i` trains with `configs[i]` under `seeds[i]`.
pub fn train_bode_ensemble(
    data: MemberData<'_>,
    configs: &[HyperConfig],
    seeds: &[u64],
    epochs: usize,
    runner: &impl MemberRunner,
) -> Result<Vec<TrainedMember>, EnsembleError> {
    if configs.len() != seeds.len() {
        return Err(EnsembleError::LengthMismatch { configs: configs.len(), seeds: seeds.len() });
    }
    collect(runner.run(configs.len(), |i| train_member(data, &configs[i].training(), epochs, seeds[i])))
}

/// Inference-mode predictions of every member on `set`, aggregated.
pub fn predict(members: &[TrainedMember], set: &SampleSet) -> Result<(Vec<MemberPrediction>, EnsemblePrediction), EnsembleError> {
    let preds: Vec<MemberPrediction> = members
        .iter()
        .enumerate()
        .map(|(member, m)| m.model.predict_set(set).map_err(|e| EnsembleError::Training { member, source: e.into() }))
        .collect::<Result<_, _>>()?;
    let agg = aggregate(&preds)?;
    Ok((preds, agg))
}
