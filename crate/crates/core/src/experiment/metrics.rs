use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid_pde::StateField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FieldMetrics {
    pub mse: f64,
    pub re: f64,
}

/// Mean squared error and relative L1 error of `u` against `truth`.
pub fn field_metrics(u: &[f64], truth: &[f64]) -> Result<FieldMetrics> {
    if u.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: u.len(),
        });
    }
    if u.is_empty() {
        return Err(Error::InvalidArgument("empty field".into()));
    }
    let mut sq = 0.0;
    let mut abs_diff = 0.0;
    let mut abs_true = 0.0;
    for (a, b) in u.iter().zip(truth) {
        let d = a - b;
        sq += d * d;
        abs_diff += d.abs();
        abs_true += b.abs();
    }
    if abs_true == 0.0 {
        return Err(Error::UndefinedRelativeError);
    }
    Ok(FieldMetrics {
        mse: sq / u.len() as f64,
        re: abs_diff / abs_true,
    })
}

/// Metrics restricted to the nodes inside `[lo, hi]^2`.
pub fn window_metrics(u: &StateField, truth: &StateField, lo: f64, hi: f64) -> Result<FieldMetrics> {
    if u.grid != truth.grid {
        return Err(Error::GridMismatch);
    }
    let (nodes, _) = u.grid.window(lo, hi);
    let a: Vec<f64> = nodes.iter().map(|&k| u.values[k]).collect();
    let b: Vec<f64> = nodes.iter().map(|&k| truth.values[k]).collect();
    field_metrics(&a, &b)
}
