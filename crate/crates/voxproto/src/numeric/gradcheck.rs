//! Finite-difference gradient checking.
//!
//! `grad_check` compares reverse-mode gradients of a scalar-valued function
//! against central differences. The reported error is relative with an
//! absolute floor: element differences below `ABS_FLOOR` count as zero, which
//! keeps finite-difference noise (~1e-11 at eps = 1e-5) from polluting
//! elements whose true gradient is exactly zero.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Differences at or below this magnitude are treated as exact agreement.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ElementReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<ElementReport>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Checks `f`'s gradient at `x` with central differences of step `eps`.
///
/// `f` must build a scalar output from its input var on the provided tape.
/// `eps` outside `[1e-7, 1e-3]` is rejected; non-finite evaluations fail.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
{
    grad_check_multi(|tape, xs| f(tape, xs[0]), &[x.clone()], eps)
}

/// Multi-input variant: checks gradients w.r.t. every tensor in `xs`.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::param(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    for (i, x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::data(format!("grad_check input {i} is non-finite")));
        }
    }

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&tape, &vars);
    let y_val = y.value();
    if y_val.numel() != 1 {
        return Err(Error::dim(format!(
            "grad_check function must return a scalar, got {:?}",
            y_val.shape()
        )));
    }
    if !y_val.is_finite() {
        return Err(Error::data("grad_check function value is non-finite".to_string()));
    }
    let grads = y.backward()?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.tensor(*v)).collect();

    // Numeric pass: central differences, one element at a time.
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let v = f(&tape, &vars).value();
        if !v.is_finite() {
            return Err(Error::data("grad_check perturbed value is non-finite".to_string()));
        }
        Ok(v.item())
    };

    let mut max_rel = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    let mut flat_index = 0usize;
    for (ti, x) in xs.iter().enumerate() {
        for e in 0..x.numel() {
            let mut plus = x.data().to_vec();
            let mut minus = plus.clone();
            plus[e] += eps;
            minus[e] -= eps;
            let mut inputs = xs.to_vec();
            inputs[ti] = Tensor::from_parts(x.shape().to_vec(), plus);
            let fp = eval(&inputs)?;
            inputs[ti] = Tensor::from_parts(x.shape().to_vec(), minus);
            let fm = eval(&inputs)?;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[ti].data()[e];
            let r = rel_err(a, numeric);
            checked += 1;
            if r > max_rel {
                max_rel = r;
                worst = Some(ElementReport {
                    index: flat_index + e,
                    analytic: a,
                    numeric,
                    rel_err: r,
                });
            }
        }
        flat_index += x.numel();
    }

    Ok(GradCheckReport { max_rel_err: max_rel, worst, checked })
}
