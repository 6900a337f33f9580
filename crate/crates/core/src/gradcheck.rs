//! Central finite-difference verification of tape adjoints.

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic − numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coords: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    check_impl(f, x, step, tol, None)
}

/// Same as [`finite_diff_check`] with a deliberately corrupted adjoint for `fault`.
pub fn finite_diff_check_with_fault<T, F>(
    f: F,
    x: &Tensor<T>,
    step: f64,
    tol: f64,
    fault: OpKind,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    check_impl(f, x, step, tol, Some(fault))
}

fn eval_at<T, F>(f: &F, x: Tensor<T>) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let xv = tape.leaf(x, false);
    let out = f(&mut tape, xv)?;
    scalar_value(&tape, out)
}

fn scalar_value<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {} values",
            t.numel()
        )));
    }
    let value = t.data()[0].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(Error::Numeric("finite-difference evaluation".into()));
    }
    Ok(value)
}

fn check_impl<T, F>(f: F, x: &Tensor<T>, step: f64, tol: f64, fault: Option<OpKind>) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(kind) = fault {
        tape.inject_fault(kind);
    }
    let xv = tape.leaf(x.clone(), true);
    let out = f(&mut tape, xv)?;
    scalar_value(&tape, out)?;
    tape.backward(out)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    analytic.ensure_finite("analytic gradient")?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        coords: x.numel(),
        tol,
    };
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] = plus.data()[i] + lit(step);
        let mut minus = x.clone();
        minus.data_mut()[i] = minus.data()[i] - lit(step);
        let numeric = (eval_at(&f, plus)? - eval_at(&f, minus)?) / (2.0 * step);
        let a = analytic.data()[i].to_f64().unwrap_or(f64::NAN);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
