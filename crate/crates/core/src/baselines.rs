//! County-aggregation regressors: ordinary least squares and ridge on the
//! per-bag mean of the instance features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::synthgeo::{Bag, Dataset};

/// Per-feature mean over the instances of a bag.
pub fn aggregate_bag(bag: &Bag) -> Vec<f64> {
    let (k, d) = (bag.len(), bag.width());
    let mut out = vec![0.0; d];
    for i in 0..k {
        for (o, v) in out.iter_mut().zip(bag.instances.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= k as f64);
    out
}

/// One aggregated row per bag, `n × D`.
pub fn aggregate(data: &Dataset) -> Result<Tensor> {
    let d = data.dim();
    let rows: Vec<f64> = data.bags.iter().flat_map(aggregate_bag).collect();
    Tensor::matrix(data.bags.len(), d, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub fit_intercept: bool,
}

impl LinearModel {
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        predict(self, x)
    }
}

/// Ridge fit with an unpenalized intercept. `lambda = 0` is ordinary least
/// squares.
pub fn fit(x: &Tensor, y: &[f64], lambda: f64) -> Result<LinearModel> {
    fit_with(x, y, lambda, true)
}

/// Ridge fit of a model through the origin.
pub fn fit_through_origin(x: &Tensor, y: &[f64], lambda: f64) -> Result<LinearModel> {
    fit_with(x, y, lambda, false)
}

fn fit_with(x: &Tensor, y: &[f64], lambda: f64, fit_intercept: bool) -> Result<LinearModel> {
    let (n, d) = x.dims2()?;
    if n == 0 || n != y.len() {
        return Err(Error::dim("fit", &[n, d], &[y.len()]));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Usage(format!("ridge penalty must be finite and >= 0, got {lambda}")));
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in regression inputs".into()));
    }

    let p = d + usize::from(fit_intercept);
    let a = DMatrix::from_fn(n, p, |i, j| if j < d { x.at(i, j) } else { 1.0 });
    let b = DVector::from_column_slice(y);
    let mut gram = a.transpose() * &a;
    for j in 0..d {
        gram[(j, j)] += lambda;
    }
    let rhs = a.transpose() * b;

    let w = match gram.clone().cholesky() {
        Some(chol) => {
            // one step of iterative refinement
            let w = chol.solve(&rhs);
            let r = &rhs - &gram * &w;
            w + chol.solve(&r)
        }
        None => {
            // singular normal equations: least-norm solution via SVD
            let svd = gram.svd(true, true);
            let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
            svd.solve(&rhs, tol).map_err(|e| Error::Degenerate(e.to_string()))?
        }
    };
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("regression solve produced non-finite weights".into()));
    }
    Ok(LinearModel {
        weights: w.iter().take(d).copied().collect(),
        intercept: if fit_intercept { w[d] } else { 0.0 },
        lambda,
        fit_intercept,
    })
}

/// `x w + intercept` for every row of `x`.
pub fn predict(model: &LinearModel, x: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    if d != model.weights.len() {
        return Err(Error::dim("predict", &[n, d], &[model.weights.len()]));
    }
    Ok((0..n)
        .map(|i| {
            x.row(i)
                .iter()
                .zip(&model.weights)
                .map(|(a, w)| a * w)
                .sum::<f64>()
                + model.intercept
        })
        .collect())
}
