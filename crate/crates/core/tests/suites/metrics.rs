use autofed::metrics::{evaluate_slices, MetricsReport, DEFAULT_MAPE_THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-loop reference for every metric.
pub fn brute_force(pred: &[f64], target: &[f64], threshold: f64) -> MetricsReport {
    let n = pred.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut kept = 0usize;
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        abs += d.abs();
        sq += d * d;
        if target[i].abs() >= threshold {
            pct += (d / target[i]).abs();
            kept += 1;
        }
    }
    let mse = sq / n;
    MetricsReport {
        mae: abs / n,
        rmse: mse.sqrt(),
        mse,
        mape_percent: if kept == 0 { 0.0 } else { 100.0 * pct / kept as f64 },
        masked_fraction: (pred.len() - kept) as f64 / n,
    }
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * b.abs().max(1.0)
}

pub fn matches_brute_force_on_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let len = rng.random_range(1..=64);
        let target: Vec<f64> = (0..len).map(|_| rng.random_range(-20.0..20.0)).collect();
        let pred: Vec<f64> = (0..len).map(|_| rng.random_range(-20.0..20.0)).collect();
        let got = evaluate_slices(&pred, &target, DEFAULT_MAPE_THRESHOLD).unwrap();
        let want = brute_force(&pred, &target, DEFAULT_MAPE_THRESHOLD);
        for (name, a, b) in [
            ("mae", got.mae, want.mae),
            ("mse", got.mse, want.mse),
            ("rmse", got.rmse, want.rmse),
            ("mape", got.mape_percent, want.mape_percent),
            ("masked", got.masked_fraction, want.masked_fraction),
        ] {
            assert!(close(a, b), "vector {i}: {name} {a} vs {b}");
        }
    }
}
