//! MAE, RMSE, MSE and masked MAPE, all as per-element means.

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError};

/// Targets with `|y|` below this are excluded from MAPE.
pub const DEFAULT_MAPE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub rmse: f64,
    pub mse: f64,
    pub mape_percent: f64,
    /// Fraction of targets masked out of MAPE.
    pub masked_fraction: f64,
}

pub fn evaluate(prediction: &Tensor, target: &Tensor) -> Result<MetricsReport> {
    evaluate_with_threshold(prediction, target, DEFAULT_MAPE_THRESHOLD)
}

pub fn evaluate_with_threshold(prediction: &Tensor, target: &Tensor, mape_threshold: f64) -> Result<MetricsReport> {
    if prediction.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate",
            left: prediction.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    evaluate_slices(prediction.data(), target.data(), mape_threshold)
}

pub fn evaluate_slices(prediction: &[f64], target: &[f64], mape_threshold: f64) -> Result<MetricsReport> {
    if prediction.len() != target.len() {
        return Err(TensorError::ShapeMismatch {
            op: "evaluate",
            left: vec![prediction.len()],
            right: vec![target.len()],
        });
    }
    if prediction.is_empty() {
        return Err(TensorError::Contract("cannot evaluate empty predictions".into()));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    let mut pct = 0.0;
    let mut kept = 0usize;
    for (p, y) in prediction.iter().zip(target) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() >= mape_threshold {
            pct += (e / y).abs();
            kept += 1;
        }
    }
    let n = prediction.len() as f64;
    let mse = sq / n;
    Ok(MetricsReport {
        mae: abs / n,
        rmse: mse.sqrt(),
        mse,
        mape_percent: if kept == 0 { 0.0 } else { 100.0 * pct / kept as f64 },
        masked_fraction: (prediction.len() - kept) as f64 / n,
    })
}

/// Weighted combination of per-client reports, e.g. by node counts.
pub fn weighted_average(reports: &[(MetricsReport, f64)]) -> Option<MetricsReport> {
    let total: f64 = reports.iter().map(|(_, w)| w).sum();
    if reports.is_empty() || total <= 0.0 {
        return None;
    }
    let mut out = MetricsReport {
        mae: 0.0,
        rmse: 0.0,
        mse: 0.0,
        mape_percent: 0.0,
        masked_fraction: 0.0,
    };
    for (r, w) in reports {
        let w = w / total;
        out.mae += w * r.mae;
        out.mse += w * r.mse;
        out.mape_percent += w * r.mape_percent;
        out.masked_fraction += w * r.masked_fraction;
    }
    out.rmse = out.mse.sqrt();
    Some(out)
}
