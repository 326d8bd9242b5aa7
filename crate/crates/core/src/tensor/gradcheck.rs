//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Pins a closure to the higher-ranked signature the checks expect, so it
/// can be bound to a variable before use.
pub fn scalar_fn<F>(f: F) -> F
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    f
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let out = f(tape.constant(x.clone())).map_err(|e| match e {
        Error::NonFinite { op } => Error::Contract {
            op: "finite_diff_check",
            msg: format!("f is not finite at the probe point ({op})"),
        },
        other => other,
    })?;
    let v = out.value();
    if v.numel() != 1 {
        return contract("finite_diff_check", "f must be scalar-valued");
    }
    Ok(v.data()[0])
}

/// Analytic gradient of `f` at `x` via the tape.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(xv)?;
    let grads = tape.backward(out)?;
    Ok(grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.dims())))
}

/// Max over all coordinates of
/// `|analytic − central| / (|analytic| + |central| + 1e−12)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, eps, &coords)
}

/// [`finite_diff_check`] restricted to the listed flat coordinates.
pub fn finite_diff_check_coords<F>(f: F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return contract("finite_diff_check", "eps must be positive");
    }
    eval(&f, x)?;
    let analytic = analytic_gradient(&f, x)?;
    let mut worst: f64 = 0.0;
    for &i in coords {
        if i >= x.numel() {
            return contract("finite_diff_check", format!("coordinate {i} out of range"));
        }
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        // Divide by the step actually realised in floating point.
        let step = plus.data()[i] - minus.data()[i];
        let central = (eval(&f, &plus)? - eval(&f, &minus)?) / step;
        let a = analytic.data()[i];
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
