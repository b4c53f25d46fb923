//! Central-difference gradient checking.

mod suite;

pub use suite::{run_suite, CaseResult, SuiteOptions, SuiteReport, CASES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor of the relative-error denominator.
pub const DIV_EPS: f64 = 1e-8;

/// Analytic vs. numeric gradients for every input of a checked function.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Largest relative error per input.
    pub max_rel_error: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradReport {
    /// Largest relative error over all inputs.
    pub fn max_error(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, DIV_EPS)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DIV_EPS)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let out = f(inputs)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: closure must return a scalar, got shape {:?}",
            out.shape()
        )));
    }
    let v = out.item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("grad_check: closure returned {v}")));
    }
    Ok(v)
}

/// Compare the reverse-mode gradient of a scalar-valued `f` with central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element.
///
/// The values of `inputs` are the evaluation point; their gradient flags
/// are ignored (every input is differentiated).
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::Contract(format!(
            "grad_check: step {h} outside [1e-6, 1e-3]"
        )));
    }

    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::param(t.to_vec(), t.shape()))
        .collect::<Result<_>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: closure must return a scalar, got shape {:?}",
            out.shape()
        )));
    }
    if !out.item()?.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite output".into()));
    }
    out.backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().expect("leaf requires grad"))
        .collect();
    drop(out);

    let mut point: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let base = inputs[i].to_vec();
        let shape = inputs[i].shape().to_vec();
        let mut grad = Vec::with_capacity(base.len());
        for j in 0..base.len() {
            let mut bumped = base.clone();
            bumped[j] = base[j] + h;
            point[i] = Tensor::new(bumped.clone(), &shape)?;
            let plus = eval_scalar(&f, &point)?;
            bumped[j] = base[j] - h;
            point[i] = Tensor::new(bumped, &shape)?;
            let minus = eval_scalar(&f, &point)?;
            grad.push((plus - minus) / (2.0 * h));
        }
        point[i] = Tensor::new(base, &shape)?;
        numeric.push(grad);
    }

    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            a.iter()
                .zip(n)
                .map(|(&a, &n)| relative_error(a, n))
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(GradReport {
        max_rel_error,
        analytic,
        numeric,
    })
}
