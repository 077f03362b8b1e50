//! Metrics, attention analysis and the experiment protocols.

mod protocol;
mod report;

pub use protocol::{
    ablate, attention_correlations, compare, inseason, prepare, run_method, sweep, AblationRow, Fitted, InseasonRow,
    Method, MethodResult, Prepared, Protocol, RunResult, SweepRow,
};
pub use report::{
    attention_map_svg, scatter_svg, write_ablation, write_attention, write_inseason, write_per_bag, write_sweep,
    write_trace, MethodMetrics, MetricsReport, RepMetrics,
};

use crate::error::{Error, Result};
use crate::synthgeo::Bag;

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim(op, &[a.len()], &[b.len()]));
    }
    Ok(())
}

/// Root mean squared error.
pub fn rmse(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair("rmse", observed, predicted)?;
    if observed.is_empty() {
        return Err(Error::Usage("rmse of zero values".into()));
    }
    let ss: f64 = observed.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    Ok((ss / observed.len() as f64).sqrt())
}

/// Coefficient of determination around the mean of `observed`.
pub fn r2(observed: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair("r2", observed, predicted)?;
    if observed.len() < 2 {
        return Err(Error::Usage("r2 needs at least two values".into()));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let ss_tot: f64 = observed.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Degenerate("r2 of a constant target".into()));
    }
    let ss_res: f64 = observed.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Pearson correlation, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("pearson", x, y)?;
    if x.len() < 2 {
        return Err(Error::Usage("pearson needs at least two values".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("pearson correlation with a constant series".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Rescales non-negative values to sum to one.
pub fn bag_normalize(values: &[f64]) -> Result<Vec<f64>> {
    if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("bag_normalize needs finite non-negative values, got {v}")));
    }
    let sum: f64 = values.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate("bag_normalize of an all-zero bag".into()));
    }
    Ok(values.iter().map(|v| v / sum).collect())
}

/// Correlation between bag-normalized attention and bag-normalized corn
/// ratio, pooled over every instance of every bag.
pub fn attention_ratio_correlation(attention: &[Vec<f64>], bags: &[Bag]) -> Result<f64> {
    if attention.len() != bags.len() {
        return Err(Error::dim("attention_ratio_correlation", &[attention.len()], &[bags.len()]));
    }
    let mut a = Vec::new();
    let mut r = Vec::new();
    for (att, bag) in attention.iter().zip(bags) {
        check_pair("attention_ratio_correlation", att, &bag.ratios)?;
        a.extend(bag_normalize(att)?);
        r.extend(bag_normalize(&bag.ratios)?);
    }
    pearson(&a, &r)
}

/// `(v - min) / (max - min) × 100` for every value.
pub fn importance(values: &[f64]) -> Result<Vec<f64>> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) || !min.is_finite() || !max.is_finite() {
        return Err(Error::Degenerate("importance needs at least two distinct finite values".into()));
    }
    Ok(values.iter().map(|v| (v - min) / (max - min) * 100.0).collect())
}

/// Median, averaging the middle pair for even lengths. NaN for no values.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
