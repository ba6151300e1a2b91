use bode_core::ensemble::EnsemblePrediction;
use bode_core::metrics::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..200).prop_flat_map(|n| (prop::collection::vec(-10.0f64..10.0, n), prop::collection::vec(-10.0f64..10.0, n)))
}

proptest! {
    #[test]
    fn mse_is_bias_squared_plus_residual_variance((y, mu) in pairs()) {
        let n = y.len() as f64;
        let r: Vec<f64> = y.iter().zip(&mu).map(|(a, b)| a - b).collect();
        let bias = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|e| (e - bias) * (e - bias)).sum::<f64>() / n;
        let mse = rmse(&y, &mu).unwrap().powi(2);
        prop_assert!((mse - (bias * bias + var)).abs() <= 1e-10 * mse.max(1.0));
    }

    #[test]
    fn r2_is_one_minus_scaled_mse((y, mu) in pairs()) {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
        prop_assume!(ss_tot > 1e-9);
        let e = rmse(&y, &mu).unwrap();
        let want = 1.0 - e * e * n / ss_tot;
        prop_assert!((r_squared(&y, &mu).unwrap() - want).abs() <= 1e-10 * want.abs().max(1.0));
    }
}

#[test]
fn coverage_of_exact_gaussians_is_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000;
    let mut y = Vec::with_capacity(n);
    let mut pred = EnsemblePrediction { members: 2, ..EnsemblePrediction::default() };
    for i in 0..n {
        let mu = (i as f64 * 0.001).sin();
        let var = 0.1 + (i % 7) as f64 * 0.2;
        y.push(Normal::new(mu, var.sqrt()).unwrap().sample(&mut rng));
        pred.mean.push(mu);
        pred.total_var.push(var);
        pred.aleatoric_var.push(var);
        pred.epistemic_var.push(0.0);
    }
    let c95 = coverage(&y, &pred, 0.95).unwrap();
    assert!((c95 - 0.95).abs() < 0.01, "{c95}");
    let c68 = coverage(&y, &pred, 0.6827).unwrap();
    assert!((c68 - 0.6827).abs() < 0.01, "{c68}");
}

#[test]
fn gaussian_quantiles_match_tables() {
    assert!((gaussian_quantile(0.95).unwrap() - 1.959963984540054).abs() < 1e-9);
    assert!((gaussian_quantile(0.6826894921370859).unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn report_round_trips_through_json() {
    let y = [1.0, 2.0, 3.5, 4.0];
    let pred = EnsemblePrediction {
        mean: vec![1.1, 1.9, 3.0, 4.2],
        total_var: vec![0.1, 0.2, 0.3, 0.4],
        aleatoric_var: vec![0.05, 0.1, 0.2, 0.3],
        epistemic_var: vec![0.05, 0.1, 0.1, 0.1],
        members: 3,
    };
    let r = MetricReport::compute("test", &y, &pred).unwrap();
    let back: MetricReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}
