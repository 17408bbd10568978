//! Central finite-difference oracle for backward rules.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error: gradients smaller than this
/// are compared in absolute terms scaled by the floor.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub max_rel_err: f64,
    /// Flat index of the element with the worst error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub eps: f64,
    pub tol: f64,
    pub inputs: Vec<InputCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|i| i.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|i| i.max_rel_err)
            .fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the tape's gradients of the scalar `f(inputs)` with
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)` for every element of every
/// input.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as [`Error::Determinism`].
pub fn gradcheck<F>(inputs: &[Tensor<f64>], eps: f64, tol: f64, f: F) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!(
            "gradcheck eps must be positive, got {eps}"
        )));
    }

    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.dims()))
            })
            .collect()
    };

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value_ref();
        if !v.dims().is_scalar() {
            return Err(Error::shape(format!(
                "gradcheck needs a scalar output, got {}",
                v.dims()
            )));
        }
        Ok(v.item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let first = eval(&work)?;
    let second = eval(&work)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism(format!(
            "two evaluations at the same point gave {first} and {second}"
        )));
    }

    let mut checks = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut worst = InputCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = x0 - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            if err > worst.max_rel_err || err.is_nan() {
                worst = InputCheck {
                    max_rel_err: err,
                    worst_index: j,
                    analytic: a,
                    numeric,
                    passed: true,
                };
            }
        }
        worst.passed = worst.max_rel_err <= tol;
        checks.push(worst);
    }
    Ok(GradcheckReport {
        eps,
        tol,
        inputs: checks,
    })
}
