//! End-to-end acceptance checks, one PASS/FAIL line each.
//!
//! Run with `cargo test --release -p bode --test acceptance`. The full
//! suite trains several ensembles and takes a while in debug builds.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use bode::config::RunConfig;
use bode::pipeline::{self, RunOutput};
use bode_core::bench::sine_splits;
use bode_core::ensemble::aggregate;
use bode_core::gp::{fit_gp, rbf_kernel, FitOptions, GpHyperparameters, GpModel};
use bode_core::nn::{nll_loss, DenseNetSpec, MemberPrediction, Network, DEFAULT_VARIANCE_FLOOR};
use bode_core::orchestrator::{member_seed, run_member_bo, run_sobol_search, BoBudget, NetworkObjective};
use bode_core::quasirand::{bundled_table, SobolGenerator, MAX_BITS};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-300)
}

fn ensemble_identity() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let m = r.random_range(2..=20);
        let n = r.random_range(1..50);
        let members: Vec<MemberPrediction> = (0..m)
            .map(|_| MemberPrediction {
                mean: (0..n).map(|_| r.random_range(-10.0..10.0)).collect(),
                variance: (0..n).map(|_| r.random_range(1e-4..5.0)).collect(),
            })
            .collect();
        let agg = aggregate(&members).map_err(|e| e.to_string())?;
        let mf = m as f64;
        for j in 0..n {
            let mean = members.iter().map(|p| p.mean[j]).sum::<f64>() / mf;
            let second = members.iter().map(|p| p.variance[j] + p.mean[j] * p.mean[j]).sum::<f64>() / mf;
            let total = second - mean * mean;
            let rel = (agg.total_var[j] - total).abs() / total.abs();
            worst = worst.max(rel);
            ensure(close(agg.total_var[j], total, 1e-10), || format!("ensemble {trial} point {j}: {} vs {total}", agg.total_var[j]))?;
            let split = agg.aleatoric_var[j] + agg.epistemic_var[j];
            ensure(close(agg.total_var[j], split, 1e-10), || format!("ensemble {trial} point {j}: split {split}"))?;
        }
        let dup = aggregate(&vec![members[0].clone(); m]).map_err(|e| e.to_string())?;
        ensure(dup.epistemic_var.iter().all(|v| *v == 0.0), || format!("ensemble {trial}: duplicated members have spread"))?;
    }
    Ok(format!("1000 ensembles, worst relative error {worst:.1e}"))
}

fn loss_at(net: &Network, x: &[f64], y: &[f64]) -> f64 {
    let p = net.forward(x, net.spec().input_dim, None).unwrap();
    nll_loss(&p, y).unwrap().value
}

fn network_gradient() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let spec = DenseNetSpec {
            input_dim: r.random_range(1..5),
            block_layers: (0..r.random_range(1..4)).map(|_| r.random_range(1..4)).collect(),
            growth_rate: r.random_range(1..6),
            initial_features: r.random_range(2..8),
            drop_rate: 0.0,
            variance_floor: DEFAULT_VARIANCE_FLOOR,
        };
        let mut net = Network::init(spec.clone(), seed).map_err(|e| e.to_string())?;
        for p in net.parameters_mut() {
            *p += 0.1 * (r.random::<f64>() - 0.5);
        }
        let x: Vec<f64> = (0..8 * spec.input_dim).map(|_| r.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..8).map(|_| r.random::<f64>() - 0.5).collect();
        let (_, grad) = net.nll_gradient(&x, spec.input_dim, &y, None).map_err(|e| e.to_string())?;
        let eps = 1e-5;
        for (i, g) in grad.iter().enumerate() {
            let orig = net.parameters()[i];
            net.parameters_mut()[i] = orig + eps;
            let up = loss_at(&net, &x, &y);
            net.parameters_mut()[i] = orig - eps;
            let down = loss_at(&net, &x, &y);
            net.parameters_mut()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:.2e}"))?;
    Ok(format!("5 networks, every parameter, max relative error {worst:.2e}"))
}

const SOBOL_REFERENCE: [[f64; 5]; 10] = [
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.5, 0.5, 0.5, 0.5],
    [0.75, 0.25, 0.25, 0.25, 0.75],
    [0.25, 0.75, 0.75, 0.75, 0.25],
    [0.375, 0.375, 0.625, 0.875, 0.375],
    [0.875, 0.875, 0.125, 0.375, 0.875],
    [0.625, 0.125, 0.875, 0.625, 0.625],
    [0.125, 0.625, 0.375, 0.125, 0.125],
    [0.1875, 0.3125, 0.9375, 0.4375, 0.5625],
    [0.6875, 0.8125, 0.4375, 0.9375, 0.0625],
];

/// XOR of scaled direction integers over the set bits of `n`.
fn direct_sobol(n: u64, dims: usize) -> Vec<f64> {
    let table = bundled_table();
    (0..dims)
        .map(|d| {
            let v: Vec<u32> = if d == 0 {
                (0..MAX_BITS).map(|k| 1u32 << (MAX_BITS - 1 - k)).collect()
            } else {
                let p = &table[d - 1];
                let s = p.degree;
                let mut v: Vec<u32> = p.initial.iter().enumerate().map(|(k, &m)| m << (MAX_BITS - 1 - k)).collect();
                for k in s..MAX_BITS {
                    let mut next = v[k - s] ^ (v[k - s] >> s);
                    for j in 1..s {
                        if (p.coefficients >> (s - 1 - j)) & 1 == 1 {
                            next ^= v[k - j];
                        }
                    }
                    v.push(next);
                }
                v
            };
            let x = v.iter().enumerate().filter(|(k, _)| (n >> k) & 1 == 1).fold(0u32, |acc, (_, vk)| acc ^ vk);
            x as f64 / (1u64 << MAX_BITS) as f64
        })
        .collect()
}

fn sobol_sequence() -> Outcome {
    for dims in 1..=5 {
        let mut g = SobolGenerator::new(dims, 0).map_err(|e| e.to_string())?;
        for (n, row) in SOBOL_REFERENCE.iter().enumerate() {
            let p = g.next_point().map_err(|e| e.to_string())?;
            ensure(p == row[..dims], || format!("{dims}-D point {n}: {p:?}"))?;
        }
    }
    let mut g = SobolGenerator::new(16, 0).map_err(|e| e.to_string())?;
    for n in 0..1024u64 {
        let p = g.next_point().map_err(|e| e.to_string())?;
        ensure(p == direct_sobol(n ^ (n >> 1), 16), || format!("point {n} differs from the direct construction"))?;
    }
    for k in 0..=10u32 {
        let n = 1usize << k;
        let pts = SobolGenerator::new(2, 0).map_err(|e| e.to_string())?.take_points(n).map_err(|e| e.to_string())?;
        for a in 0..=k {
            let b = k - a;
            let mut seen = vec![false; n];
            for p in &pts {
                let cell = ((p[0] * (1u64 << a) as f64) as usize) << b | (p[1] * (1u64 << b) as f64) as usize;
                ensure(!seen[cell], || format!("2^{k} points: box {a}x{b} hit twice"))?;
                seen[cell] = true;
            }
        }
    }
    Ok("reference points dims 1-5 exact, 1024 points match direct construction, elementary intervals to 2^10".into())
}

fn dense_posterior(model: &GpModel, x: &[f64]) -> (f64, f64) {
    let h = model.hyperparameters();
    let xs = model.inputs();
    let n = xs.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        let v = rbf_kernel(&xs[i], &xs[j], &h.lengthscales, h.signal_variance).unwrap();
        if i == j {
            v + h.noise_variance + model.jitter()
        } else {
            v
        }
    });
    let y = DVector::from_iterator(n, model.targets().iter().copied());
    let ks = DVector::from_iterator(n, xs.iter().map(|xi| rbf_kernel(xi, x, &h.lengthscales, h.signal_variance).unwrap()));
    let lu = k.lu();
    let a = lu.solve(&y).unwrap();
    let b = lu.solve(&ks).unwrap();
    (ks.dot(&a), h.signal_variance - ks.dot(&b))
}

fn random_inputs(r: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..dim).map(|_| r.random()).collect()).collect()
}

fn gp_posterior() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let data: Vec<(Vec<f64>, f64)> = random_inputs(&mut r, 20, 8)
            .into_iter()
            .map(|x| {
                let y = x.iter().enumerate().map(|(d, v)| ((d + 1) as f64 * v).sin()).sum::<f64>();
                (x, y)
            })
            .collect();
        let model = fit_gp(&data, &FitOptions { seed, ..FitOptions::default() }).map_err(|e| e.to_string())?;
        for x in random_inputs(&mut r, 20, 8) {
            let p = model.posterior(&x).map_err(|e| e.to_string())?;
            let (m, v) = dense_posterior(&model, &x);
            worst = worst.max((p.mean - m).abs()).max((p.variance - v.max(0.0)).abs());
        }
    }
    ensure(worst < 1e-8, || format!("dense solve differs by {worst:.2e}"))?;

    let data: Vec<(Vec<f64>, f64)> = random_inputs(&mut r, 15, 3).into_iter().map(|x| (x.clone(), 5.0 + x[0] * x[1] - x[2])).collect();
    let hyper = GpHyperparameters { lengthscales: vec![0.3; 3], signal_variance: 1.0, noise_variance: 0.0 };
    let model = GpModel::with_hyperparameters(&data, hyper.clone(), 1e-10, 1e-4).map_err(|e| e.to_string())?;
    for (x, y) in &data {
        let got = model.posterior(x).map_err(|e| e.to_string())?.raw_mean();
        ensure((got - y).abs() < 1e-6 * y.abs(), || format!("interpolation {got} vs {y}"))?;
    }

    let mut base = data;
    let mut prev = model;
    let probes = random_inputs(&mut r, 20, 3);
    for i in 0..100 {
        let x: Vec<f64> = (0..3).map(|_| r.random()).collect();
        base.push((x, r.random()));
        let next = GpModel::with_hyperparameters(&base, hyper.clone(), 1e-10, 1e-4).map_err(|e| e.to_string())?;
        for q in &probes {
            let (a, b) = (prev.posterior(q).unwrap().variance, next.posterior(q).unwrap().variance);
            ensure(b <= a + 1e-8 + 10.0 * next.jitter(), || format!("addition {i}: variance {a} -> {b}"))?;
        }
        prev = next;
    }
    Ok(format!("dense oracle max difference {worst:.1e}, interpolation exact, 100 additions never raise variance"))
}

fn bo_beats_sobol() -> Outcome {
    let budget = BoBudget { n_bo: 22, n_sobol: 8, ..BoBudget::default() };
    let mut wins = 0;
    let mut rows = Vec::new();
    for s in 0..10u64 {
        let (tr, va) = sine_splits(200, 100, 1000 + s);
        let obj = NetworkObjective { train: &tr, validation: &va, epochs: 20, width_divisor: 4, noise: None };
        let bo = run_member_bo(&obj, 0, member_seed(s, 0), &budget).map_err(|e| e.to_string())?;
        let so = run_sobol_search(&obj, 0, member_seed(s, 0), &budget).map_err(|e| e.to_string())?;
        if bo.best_rmse <= so.best_rmse {
            wins += 1;
        }
        rows.push(format!("{:.4}/{:.4}", bo.best_rmse, so.best_rmse));
    }
    ensure(wins >= 8, || format!("{wins}/10 seeds; bo/sobol {}", rows.join(" ")))?;
    Ok(format!("{wins}/10 seeds; bo/sobol {}", rows.join(" ")))
}

fn default_config(noise: f64) -> RunConfig {
    RunConfig {
        seed: 1,
        jobs: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        noise,
        ..RunConfig::default()
    }
}

struct Runs {
    clean: Result<RunOutput, String>,
    baseline: Result<RunOutput, String>,
    noisy5: Result<RunOutput, String>,
    noisy10: Result<RunOutput, String>,
    clean_time: Duration,
    noisy_time: Duration,
}

fn train_runs() -> Runs {
    let t = Instant::now();
    let clean = pipeline::run_bode(&default_config(0.0), None, false).map_err(|e| e.to_string());
    let clean_time = t.elapsed();
    let baseline = pipeline::run_baseline(&default_config(0.0), None, false).map_err(|e| e.to_string());
    let t = Instant::now();
    let noisy5 = pipeline::run_bode(&default_config(0.05), None, false).map_err(|e| e.to_string());
    let noisy10 = pipeline::run_bode(&default_config(0.10), None, false).map_err(|e| e.to_string());
    Runs { clean, baseline, noisy5, noisy10, clean_time, noisy_time: t.elapsed() }
}

fn get(r: &Result<RunOutput, String>) -> Result<&RunOutput, String> {
    r.as_ref().map_err(|e| format!("run failed: {e}"))
}

fn clean_uncertainty(runs: &Runs) -> Outcome {
    let (bode, base) = (get(&runs.clean)?, get(&runs.baseline)?);
    let rep = &bode.report;
    let ratio = rep.ensemble.uncertainty.mean_aleatoric_std / rep.dataset.test_target_rms;
    let (tb, tf) = (rep.ensemble.uncertainty.mean_total_std, base.report.ensemble.uncertainty.mean_total_std);
    let detail = format!("aleatoric/rms {ratio:.4}, total std bode {tb:.4e} vs baseline {tf:.4e}, bode run {:.0}s", runs.clean_time.as_secs_f64());
    ensure(ratio < 0.02 && tb <= tf && runs.clean_time < Duration::from_secs(15 * 60), || detail.clone())?;
    Ok(detail)
}

fn noise_recovery(runs: &Runs) -> Outcome {
    let (a, b) = (get(&runs.noisy5)?, get(&runs.noisy10)?);
    let (na, nb) = (a.report.noise_recovery.as_ref().ok_or("no recovery block")?, b.report.noise_recovery.as_ref().ok_or("no recovery block")?);
    let detail = format!(
        "total/injected 5% {:.3}, 10% {:.3}; predicted std {:.4e} < {:.4e}; {:.0}s",
        na.total_to_injected_ratio,
        nb.total_to_injected_ratio,
        na.predicted_total_mean_std,
        nb.predicted_total_mean_std,
        runs.noisy_time.as_secs_f64()
    );
    let in_band = |v: f64| (0.6..=1.4).contains(&v);
    ensure(
        in_band(na.total_to_injected_ratio)
            && in_band(nb.total_to_injected_ratio)
            && nb.predicted_total_mean_std > na.predicted_total_mean_std
            && runs.noisy_time < Duration::from_secs(30 * 60),
        || detail.clone(),
    )?;
    Ok(detail)
}

fn rmse_ordering(runs: &Runs) -> Outcome {
    let r: Vec<f64> = [&runs.clean, &runs.noisy5, &runs.noisy10].into_iter().map(|x| get(x).map(|o| o.report.ensemble.rmse)).collect::<Result<_, _>>()?;
    let detail = format!("rmse clean {:.4e}, 5% {:.4e}, 10% {:.4e}", r[0], r[1], r[2]);
    ensure(r[0] < r[1] && r[1] < r[2], || detail.clone())?;
    Ok(detail)
}

fn coverage(runs: &Runs) -> Outcome {
    let e = &get(&runs.noisy5)?.report.ensemble;
    let detail = format!("coverage 68 {:.3}, 95 {:.3}", e.coverage_68, e.coverage_95);
    ensure((0.55..=0.80).contains(&e.coverage_68) && (0.88..=0.99).contains(&e.coverage_95), || detail.clone())?;
    Ok(detail)
}

fn rerun_matches(dir: &Path, fresh: &Path, bode: bool) -> Result<(), String> {
    let cfg = RunConfig::load(&dir.join("manifest.json")).map_err(|e| e.to_string())?;
    if bode {
        pipeline::run_bode(&cfg, Some(fresh), false)
    } else {
        pipeline::run_baseline(&cfg, Some(fresh), false)
    }
    .map_err(|e| e.to_string())?;
    let read = |p: &Path| fs::read(p.join("report.json")).map_err(|e| e.to_string());
    ensure(read(dir)? == read(fresh)?, || format!("{} report differs on rerun", dir.display()))
}

fn same_tree(a: &Path, b: &Path) -> Result<usize, String> {
    let mut count = 0;
    let mut names: Vec<_> = fs::read_dir(a).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            count += same_tree(&pa, &pb)?;
        } else {
            ensure(fs::read(&pa).ok() == fs::read(&pb).ok(), || format!("{} differs", pa.display()))?;
            count += 1;
        }
    }
    Ok(count)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| tmp.path().join(s);
    let base = default_config(0.0);
    pipeline::run_baseline(&base, Some(&p("base")), false).map_err(|e| e.to_string())?;
    rerun_matches(&p("base"), &p("base-again"), false)?;
    let small = RunConfig { sobol: 2, iters: 4, trial_epochs: 5, epochs: 10, noise: 0.05, ..default_config(0.0) };
    pipeline::run_bode(&small, Some(&p("bode")), false).map_err(|e| e.to_string())?;
    rerun_matches(&p("bode"), &p("bode-again"), true)?;
    pipeline::cmd_generate(&base, &p("gen"), false).map_err(|e| e.to_string())?;
    pipeline::cmd_generate(&base, &p("gen-again"), false).map_err(|e| e.to_string())?;
    let files = same_tree(&p("gen"), &p("gen-again"))?;
    Ok(format!("baseline and noisy bode reports byte-identical on rerun, generate reproduces {files} files"))
}

fn report(n: usize, outcome: Outcome, start: Instant, limit: Option<Duration>) -> bool {
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; over the {}s limit", l.as_secs())),
        (o, _) => o,
    };
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("{tag} criterion {n}: {detail} ({:.1}s)", elapsed.as_secs_f64());
    outcome.is_ok()
}

fn main() -> ExitCode {
    let secs = Duration::from_secs;
    let mut ok = true;
    let t = Instant::now();
    ok &= report(1, ensemble_identity(), t, Some(secs(10)));
    let t = Instant::now();
    ok &= report(2, network_gradient(), t, Some(secs(30)));
    let t = Instant::now();
    ok &= report(3, sobol_sequence(), t, Some(secs(5)));
    let t = Instant::now();
    ok &= report(4, gp_posterior(), t, Some(secs(60)));
    let t = Instant::now();
    ok &= report(5, bo_beats_sobol(), t, Some(secs(20 * 60)));
    let t = Instant::now();
    let runs = train_runs();
    ok &= report(6, clean_uncertainty(&runs), t, None);
    ok &= report(7, noise_recovery(&runs), t, None);
    ok &= report(8, rmse_ordering(&runs), t, None);
    ok &= report(9, coverage(&runs), t, None);
    let t = Instant::now();
    ok &= report(10, reproducibility(), t, None);
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
