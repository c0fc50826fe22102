//! Central finite-difference verification of tape gradients (64-bit only).

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{LasError, Result};

/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Max relative error per input tensor, in input order.
    pub max_rel_err: Vec<f64>,
    pub max_abs_err: f64,
    pub tol: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() <= self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the tape gradient of a scalar function against
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every element of every input.
///
/// `f` receives the inputs as trainable leaves on a fresh tape and must return a
/// single-element result.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars = xs
            .iter()
            .map(|x| tape.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?.value();
        let v = out.data()[0];
        if !v.is_finite() {
            return Err(LasError::NonFinite { op: "grad_check objective" });
        }
        Ok(v)
    };

    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|x| tape.param(x.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    if !out.value().data()[0].is_finite() {
        return Err(LasError::NonFinite { op: "grad_check objective" });
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    let mut max_abs_err: f64 = 0.0;
    let mut evaluations = 1;
    for (k, a) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for i in 0..a.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            evaluations += 2;
            let numeric = (plus - minus) / (2.0 * eps);
            let an = a.data()[i];
            worst = worst.max(relative_error(an, numeric));
            max_abs_err = max_abs_err.max((an - numeric).abs());
        }
        max_rel_err.push(worst);
    }
    Ok(GradCheckReport {
        max_rel_err,
        max_abs_err,
        tol,
        evaluations,
    })
}
