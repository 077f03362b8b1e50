use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares reverse-mode gradients of a scalar function with central
/// differences, one coordinate at a time.
///
/// `f` receives a fresh tape and the leaves for `params` (in order) and must
/// return a scalar. The result is the maximum over every coordinate of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check_many<F>(f: F, params: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }

    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("f(θ) = {value}")));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|p| tape.leaf(p.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        let v = tape.value(out).item()?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation(format!("f(θ ± ε) = {v}")))
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[p].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-tensor form of [`grad_check_many`].
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), eps)
}
