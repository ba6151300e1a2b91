//! Command implementations shared by the binary and the tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bode_core::acquisition::ProposeOptions;
use bode_core::ensemble::{self, EnsemblePrediction, MemberData, TrainedMember};
use bode_core::field::{self, FieldDataset, FrameNoise, Mesh, NoiseSpec, NormStats, EVALUATION_EPOCH_BASE};
use bode_core::hyperspace::{BaselineConfig, HyperConfig};
use bode_core::metrics::{self, MetricReport};
use bode_core::nn::{MemberPrediction, SampleSet, TargetNoise, TrainedModel};
use bode_core::orchestrator::{self, BoBudget, BodeData, Evaluation, NetworkObjective, Objective, TrialLog};
use bode_core::rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Command, RunConfig};
use crate::dataset;
use crate::error::{Error, Result};
use crate::parallel::PoolRunner;
use crate::report::{self, Coords, DatasetSummary, Manifest, MemberSummary, NoiseRecovery, NoiseSummary, RunReport, SearchSummary, Seeds};

/// Epoch tag of the fixed noise draw used for validation targets.
const VALIDATION_EPOCH: u64 = u64::MAX;

/// Dataset plus every split as network-ready samples.
pub struct Prepared {
    pub dataset: FieldDataset,
    pub stats: NormStats,
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
    pub bo_train: SampleSet,
    pub bo_val: SampleSet,
    pub noise: Option<FrameNoise>,
}

pub fn noise_seed(master: u64) -> u64 {
    rng::derive_seed(master, &[0x401])
}

pub fn baseline_seed(master: u64, member: usize) -> u64 {
    rng::derive_seed(master, &[0xBA5E, member as u64])
}

pub fn load_or_generate(cfg: &RunConfig) -> Result<FieldDataset> {
    match &cfg.data {
        Some(dir) => dataset::read(dir),
        None => {
            let mesh = match cfg.mesh_points {
                Some(points) => Mesh::Scattered { points, k: cfg.knn_k },
                None => Mesh::Uniform,
            };
            field::generate_synthetic_with(cfg.nx, cfg.nz, cfg.timesteps, cfg.seed, mesh).map_err(|e| Error::Validation(e.to_string()))
        }
    }
}

/// Features are normalized with training-split statistics. In noisy runs
/// the validation splits carry one fixed noise draw; training targets are
/// re-drawn every epoch by the trainer.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let dataset = load_or_generate(cfg)?;
    dataset.ledger.check(dataset.n_timesteps()).map_err(Error::Compute)?;
    let stats = dataset.feature_stats();
    let l = &dataset.ledger;
    let noise = (cfg.noise > 0.0).then(|| FrameNoise {
        spec: NoiseSpec { sigma: cfg.noise, filter_width: cfg.noise_filter_width, seed: noise_seed(cfg.seed) },
        nx: dataset.grid.nx,
        nz: dataset.grid.nz,
    });
    let noisy = |set: SampleSet| match &noise {
        Some(n) => n.noisy_copy(&set, VALIDATION_EPOCH),
        None => set,
    };
    Ok(Prepared {
        train: dataset.samples(&l.train, &stats),
        validation: noisy(dataset.samples(&l.validation, &stats)),
        test: dataset.samples(&l.test, &stats),
        bo_train: dataset.samples(&l.bo_train, &stats),
        bo_val: noisy(dataset.samples(&l.bo_val, &stats)),
        stats,
        dataset,
        noise,
    })
}

impl Prepared {
    fn noise_dyn(&self) -> Option<&(dyn TargetNoise + Sync)> {
        self.noise.as_ref().map(|n| n as &(dyn TargetNoise + Sync))
    }

    fn member_data(&self, cfg: &RunConfig) -> MemberData<'_> {
        MemberData { train: &self.train, validation: Some(&self.validation), noise: self.noise_dyn(), width_divisor: cfg.width_divisor }
    }

    /// Test targets: the clean frames, or `draws` fixed noise draws of them
    /// concatenated.
    pub fn test_targets(&self, draws: usize) -> Vec<f64> {
        match &self.noise {
            None => self.test.targets.clone(),
            Some(n) => (0..draws as u64).flat_map(|k| n.noisy_copy(&self.test, EVALUATION_EPOCH_BASE + k).targets).collect(),
        }
    }

    pub fn test_coords(&self) -> Vec<Coords> {
        let g = &self.dataset.grid;
        let centres = g.centres();
        let mut out = Vec::with_capacity(self.test.len());
        for &t in &self.dataset.ledger.test {
            let time = t as f64 * self.dataset.dt;
            out.extend(centres.iter().map(|c| [c[0], c[1], time]));
        }
        out
    }

    pub fn summary(&self) -> DatasetSummary {
        let l = &self.dataset.ledger;
        DatasetSummary {
            nx: self.dataset.grid.nx,
            nz: self.dataset.grid.nz,
            timesteps: self.dataset.n_timesteps(),
            seed: self.dataset.seed,
            train_frames: l.train.len(),
            validation_frames: l.validation.len(),
            test_frames: l.test.clone(),
            bo_train_frames: l.bo_train.len(),
            bo_val_frames: l.bo_val.len(),
            test_target_rms: self.dataset.target_rms(&l.test),
        }
    }
}

/// A lone member is treated as an ensemble with no spread.
pub fn combine(preds: &[MemberPrediction]) -> Result<EnsemblePrediction> {
    if preds.len() == 1 {
        let p = &preds[0];
        return Ok(EnsemblePrediction {
            mean: p.mean.clone(),
            total_var: p.variance.clone(),
            aleatoric_var: p.variance.clone(),
            epistemic_var: vec![0.0; p.len()],
            members: 1,
        });
    }
    ensemble::aggregate(preds).map_err(Error::compute)
}

fn tile(v: &[f64], times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() * times);
    for _ in 0..times {
        out.extend_from_slice(v);
    }
    out
}

/// Test-split evaluation of a set of trained models.
pub struct TestEvaluation {
    pub members: Vec<MemberPrediction>,
    pub ensemble: EnsemblePrediction,
    pub metrics: MetricReport,
    pub member_rmse: Vec<f64>,
    pub clean_rmse: f64,
    pub noise_recovery: Option<NoiseRecovery>,
    pub targets: Vec<f64>,
}

pub fn evaluate_models(models: &[&TrainedModel], prepared: &Prepared, draws: usize) -> Result<TestEvaluation> {
    let members: Vec<MemberPrediction> = models.iter().map(|m| m.predict_set(&prepared.test).map_err(Error::compute)).collect::<Result<_>>()?;
    let ens = combine(&members)?;
    let draws = if prepared.noise.is_some() { draws.max(1) } else { 1 };
    let targets = prepared.test_targets(draws);
    let tiled = EnsemblePrediction {
        mean: tile(&ens.mean, draws),
        total_var: tile(&ens.total_var, draws),
        aleatoric_var: tile(&ens.aleatoric_var, draws),
        epistemic_var: tile(&ens.epistemic_var, draws),
        members: ens.members,
    };
    let metrics = MetricReport::compute("test", &targets, &tiled).map_err(Error::compute)?;
    let member_rmse = members.iter().map(|p| metrics::rmse(&targets, &tile(&p.mean, draws)).map_err(Error::compute)).collect::<Result<_>>()?;
    let clean_rmse = metrics::rmse(&prepared.test.targets, &ens.mean).map_err(Error::compute)?;
    let noise_recovery = prepared.noise.as_ref().map(|n| {
        let clean = &prepared.test.targets;
        let injected = n.spec.sigma * clean.iter().sum::<f64>() / clean.len() as f64;
        let u = &metrics.uncertainty;
        NoiseRecovery {
            injected_mean_std: injected,
            predicted_total_mean_std: u.mean_total_std,
            predicted_aleatoric_mean_std: u.mean_aleatoric_std,
            total_to_injected_ratio: u.mean_total_std / injected,
            aleatoric_to_injected_ratio: u.mean_aleatoric_std / injected,
        }
    });
    Ok(TestEvaluation { members, ensemble: ens, metrics, member_rmse, clean_rmse, noise_recovery, targets })
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(Error::io(out))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Validation(format!("{} exists and is not empty; pass --force to overwrite", out.display())));
        }
        let ckpt = out.join("checkpoints");
        if force && ckpt.is_dir() {
            for entry in fs::read_dir(&ckpt).map_err(Error::io(&ckpt))? {
                let p = entry.map_err(Error::io(&ckpt))?.path();
                if p.extension().is_some_and(|e| e == "ckpt") {
                    fs::remove_file(&p).map_err(Error::io(&p))?;
                }
            }
        }
    }
    fs::create_dir_all(out).map_err(Error::io(out))
}

fn manifest(command: Command, cfg: &RunConfig, member_seeds: Vec<u64>) -> Manifest {
    Manifest {
        tool: "bode".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.name().into(),
        config: cfg.clone(),
        seeds: Seeds { master: cfg.seed, members: member_seeds, noise: (cfg.noise > 0.0).then(|| noise_seed(cfg.seed)) },
    }
}

pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<FieldDataset> {
    let cfg = RunConfig { data: None, ..cfg.clone() };
    cfg.validate(Command::Generate)?;
    let ds = load_or_generate(&cfg)?;
    prepare_out_dir(out, force)?;
    dataset::write(&ds, out)?;
    if cfg.noise > 0.0 {
        // preview of the first training frames under epoch-0 noise
        let spec = NoiseSpec { sigma: cfg.noise, filter_width: cfg.noise_filter_width, seed: noise_seed(cfg.seed) };
        let dir = out.join("noise_preview");
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        for &t in ds.ledger.train.iter().take(3) {
            let clean: Vec<f64> = ds.frames[t].target.iter().map(|v| *v as f64).collect();
            let noisy = field::inject_noise(&clean, ds.grid.nx, ds.grid.nz, &spec, 0, t as u64).map_err(|e| Error::Validation(e.to_string()))?;
            let bytes: Vec<u8> = noisy.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            let p = dir.join(format!("{t:05}.bin"));
            fs::write(&p, bytes).map_err(Error::io(&p))?;
        }
    }
    report::write_json(&manifest(Command::Generate, &cfg, Vec::new()), &out.join("manifest.json"))?;
    Ok(ds)
}

/// Everything a training command produced.
pub struct RunOutput {
    pub report: RunReport,
    pub members: Vec<TrainedMember>,
    pub logs: Vec<TrialLog>,
    pub evaluation: TestEvaluation,
}

fn member_summaries(members: &[TrainedMember], eval: &TestEvaluation) -> Vec<MemberSummary> {
    members
        .iter()
        .enumerate()
        .map(|(index, m)| {
            let last = m.trace.last();
            MemberSummary {
                index,
                seed: m.seed,
                epochs: m.epochs,
                config: m.config.clone(),
                final_train_rmse: last.map_or(f64::NAN, |r| r.train_rmse),
                final_validation_rmse: last.and_then(|r| r.validation_rmse),
                test_rmse: eval.member_rmse[index],
            }
        })
        .collect()
}

fn build_report(command: Command, cfg: &RunConfig, prepared: &Prepared, members: &[TrainedMember], eval: &TestEvaluation, search: Option<Vec<SearchSummary>>) -> RunReport {
    RunReport {
        command: command.name().into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        width_divisor: cfg.width_divisor,
        dataset: prepared.summary(),
        noise: prepared.noise.as_ref().map(|n| NoiseSummary {
            sigma: n.spec.sigma,
            filter_width: n.spec.filter_width,
            seed: n.spec.seed,
            eval_draws: cfg.eval_draws,
        }),
        members: member_summaries(members, eval),
        ensemble: eval.metrics.clone(),
        clean_test_rmse: eval.clean_rmse,
        noise_recovery: eval.noise_recovery.clone(),
        search,
    }
}

fn write_run(out: &Path, command: Command, cfg: &RunConfig, prepared: &Prepared, run: &RunOutput) -> Result<()> {
    let seeds = run.members.iter().map(|m| m.seed).collect();
    report::write_json(&manifest(command, cfg, seeds), &out.join("manifest.json"))?;
    report::write_json(&run.report, &out.join("report.json"))?;
    let coords = prepared.test_coords();
    let n = coords.len();
    report::write_text(&report::predictions_csv(&coords, &run.evaluation.targets[..n], &run.evaluation.ensemble.mean), &out.join("predictions.csv"))?;
    report::write_text(&report::uncertainty_csv(&coords, &run.evaluation.ensemble), &out.join("uncertainty.csv"))?;
    if command == Command::Bode {
        report::write_text(&report::trials_jsonl(&run.logs), &out.join("trials.jsonl"))?;
    }
    let ckpt = out.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(Error::io(&ckpt))?;
    for (i, m) in run.members.iter().enumerate() {
        checkpoint::save(m, &ckpt.join(format!("member_{i:02}.ckpt")))?;
    }
    Ok(())
}

/// Trains and evaluates the hand-tuned ensemble. Writes artifacts when `out`
/// is given.
pub fn run_baseline(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<RunOutput> {
    cfg.validate(Command::Baseline)?;
    if let Some(o) = out {
        prepare_out_dir(o, force)?;
    }
    let prepared = prepare(cfg)?;
    let runner = PoolRunner::new(cfg.jobs)?;
    let baseline = BaselineConfig { epochs: cfg.epochs, ..BaselineConfig::default() };
    let seeds: Vec<u64> = (0..cfg.members).map(|i| baseline_seed(cfg.seed, i)).collect();
    let members = ensemble::train_baseline_ensemble(prepared.member_data(cfg), &baseline, &seeds, &runner).map_err(Error::compute)?;
    let models: Vec<&TrainedModel> = members.iter().map(|m| &m.model).collect();
    let evaluation = evaluate_models(&models, &prepared, cfg.eval_draws)?;
    let report = build_report(Command::Baseline, cfg, &prepared, &members, &evaluation, None);
    let run = RunOutput { report, members, logs: Vec::new(), evaluation };
    if let Some(o) = out {
        write_run(o, Command::Baseline, cfg, &prepared, &run)?;
    }
    Ok(run)
}

/// Objective wrapper that records wall time.
pub struct Timed<O>(pub O);

impl<O: Objective> Objective for Timed<O> {
    fn evaluate(&self, config: &HyperConfig, seed: u64) -> Evaluation {
        let start = Instant::now();
        let e = self.0.evaluate(config, seed);
        Evaluation { rmse: e.rmse, wall_time_s: start.elapsed().as_secs_f64() }
    }
}

pub fn budget(cfg: &RunConfig) -> BoBudget {
    BoBudget {
        n_sobol: cfg.sobol,
        n_bo: cfg.iters - cfg.sobol,
        epochs_per_trial: cfg.trial_epochs,
        propose: ProposeOptions { n_raw: cfg.n_raw, n_mc_samples: cfg.mc_samples, ..ProposeOptions::default() },
        gp_restarts: cfg.gp_restarts,
    }
}

/// Per-member optimization, final training of the winners, evaluation.
pub fn run_bode(cfg: &RunConfig, out: Option<&Path>, force: bool) -> Result<RunOutput> {
    cfg.validate(Command::Bode)?;
    if let Some(o) = out {
        prepare_out_dir(o, force)?;
    }
    let prepared = prepare(cfg)?;
    let runner = PoolRunner::new(cfg.jobs)?;
    let data = BodeData {
        bo_train: &prepared.bo_train,
        bo_val: &prepared.bo_val,
        train: &prepared.train,
        validation: Some(&prepared.validation),
        noise: prepared.noise_dyn(),
        width_divisor: cfg.width_divisor,
    };
    let bode = orchestrator::run_bode(data, cfg.members, &budget(cfg), cfg.epochs, cfg.seed, &runner, |o: NetworkObjective<'_>| Timed(o))
        .map_err(Error::compute)?;
    let models: Vec<&TrainedModel> = bode.members.iter().map(|m| &m.model).collect();
    let evaluation = evaluate_models(&models, &prepared, cfg.eval_draws)?;
    let search = bode
        .searches
        .iter()
        .map(|s| SearchSummary {
            member: s.log.member,
            member_seed: orchestrator::member_seed(cfg.seed, s.log.member),
            trials: s.log.trials.len(),
            best_rmse: s.best_rmse,
            best: s.best.clone(),
            running_min: s.log.running_min(),
        })
        .collect();
    let report = build_report(Command::Bode, cfg, &prepared, &bode.members, &evaluation, Some(search));
    let logs = bode.searches.into_iter().map(|s| s.log).collect();
    let run = RunOutput { report, members: bode.members, logs, evaluation };
    if let Some(o) = out {
        write_run(o, Command::Bode, cfg, &prepared, &run)?;
    }
    Ok(run)
}

/// Recomputed metrics of one run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub label: String,
    pub command: String,
    pub members: usize,
    pub ensemble: MetricReport,
    pub clean_test_rmse: f64,
    pub noise_sigma: f64,
    pub noise_recovery: Option<NoiseRecovery>,
    /// Whether the recomputed metrics equal those stored in `report.json`.
    pub matches_stored_report: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub rmse: f64,
    pub r2: f64,
    pub mean_nll: f64,
    pub coverage_68: f64,
    pub coverage_95: f64,
    pub mean_total_std: f64,
    pub mean_aleatoric_std: f64,
    pub mean_epistemic_std: f64,
}

impl MetricDelta {
    fn between(a: &MetricReport, b: &MetricReport) -> Self {
        Self {
            rmse: b.rmse - a.rmse,
            r2: b.r2 - a.r2,
            mean_nll: b.mean_nll - a.mean_nll,
            coverage_68: b.coverage_68 - a.coverage_68,
            coverage_95: b.coverage_95 - a.coverage_95,
            mean_total_std: b.uncertainty.mean_total_std - a.uncertainty.mean_total_std,
            mean_aleatoric_std: b.uncertainty.mean_aleatoric_std - a.uncertainty.mean_aleatoric_std,
            mean_epistemic_std: b.uncertainty.mean_epistemic_std - a.uncertainty.mean_epistemic_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: Vec<RunEvaluation>,
    /// Second run minus first run.
    pub difference: MetricDelta,
    pub rmse_ratio: f64,
    pub total_std_ratio: f64,
}

/// Reloads a run directory's checkpoints and recomputes its test metrics.
pub fn evaluate_run(dir: &Path, label: &str, data_override: Option<&PathBuf>) -> Result<RunEvaluation> {
    let manifest: Manifest = report::read_json(&dir.join("manifest.json"))?;
    let stored: RunReport = report::read_json(&dir.join("report.json"))?;
    let mut cfg = manifest.config.clone();
    if let Some(d) = data_override {
        cfg.data = Some(d.clone());
    }
    let prepared = prepare(&cfg)?;
    let mut models = Vec::with_capacity(stored.members.len());
    for i in 0..stored.members.len() {
        let (_, model) = checkpoint::load(&dir.join("checkpoints").join(format!("member_{i:02}.ckpt")))?;
        models.push(model);
    }
    if models.is_empty() {
        return Err(Error::MissingArtifact(dir.join("checkpoints")));
    }
    let refs: Vec<&TrainedModel> = models.iter().collect();
    let eval = evaluate_models(&refs, &prepared, cfg.eval_draws)?;
    let matches = eval.metrics == stored.ensemble && eval.clean_rmse == stored.clean_test_rmse && eval.noise_recovery == stored.noise_recovery;
    Ok(RunEvaluation {
        label: label.into(),
        command: manifest.command,
        members: models.len(),
        ensemble: eval.metrics,
        clean_test_rmse: eval.clean_rmse,
        noise_sigma: cfg.noise,
        noise_recovery: eval.noise_recovery,
        matches_stored_report: matches,
    })
}

/// Side-by-side comparison; with one directory it is compared to itself.
pub fn cmd_evaluate(runs: &[PathBuf], data_override: Option<&PathBuf>) -> Result<Comparison> {
    if runs.is_empty() || runs.len() > 2 {
        return Err(Error::Validation("evaluate takes one or two run directories".into()));
    }
    let a = evaluate_run(&runs[0], "a", data_override)?;
    let b = match runs.get(1) {
        Some(p) => evaluate_run(p, "b", data_override)?,
        None => RunEvaluation { label: "b".into(), ..a.clone() },
    };
    let difference = MetricDelta::between(&a.ensemble, &b.ensemble);
    let rmse_ratio = b.ensemble.rmse / a.ensemble.rmse;
    let total_std_ratio = b.ensemble.uncertainty.mean_total_std / a.ensemble.uncertainty.mean_total_std;
    Ok(Comparison { runs: vec![a, b], difference, rmse_ratio, total_std_ratio })
}

/// Human-readable table of a comparison.
pub fn comparison_table(c: &Comparison) -> String {
    let mut s = String::new();
    s.push_str("run  command   members  rmse         r2         nll        cov68   cov95   total_std    alea_std     epis_std     alea/injected\n");
    for r in &c.runs {
        let u = &r.ensemble.uncertainty;
        let ratio = r.noise_recovery.as_ref().map_or("-".to_string(), |n| format!("{:.3}", n.aleatoric_to_injected_ratio));
        s.push_str(&format!(
            "{:<4} {:<9} {:<8} {:<12.6e} {:<10.6} {:<10.4} {:<7.3} {:<7.3} {:<12.6e} {:<12.6e} {:<12.6e} {}\n",
            r.label, r.command, r.members, r.ensemble.rmse, r.ensemble.r2, r.ensemble.mean_nll, r.ensemble.coverage_68, r.ensemble.coverage_95,
            u.mean_total_std, u.mean_aleatoric_std, u.mean_epistemic_std, ratio
        ));
    }
    s.push_str(&format!("rmse ratio b/a {:.4}, total std ratio b/a {:.4}\n", c.rmse_ratio, c.total_std_ratio));
    s
}
