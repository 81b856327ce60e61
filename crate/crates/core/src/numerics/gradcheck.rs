use super::graph::Graph;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Compares the tape gradient of a scalar function against central
/// differences and returns the worst relative error
/// `|analytic − numeric| / max(1e-8, |analytic|)` over all coordinates.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_probe(f, x, &coords, eps)
}

/// [`finite_diff_check`] restricted to a subset of flat coordinates.
pub fn finite_diff_probe<F>(f: F, x: &Tensor, coords: &[usize], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be > 0, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let v = tape.var(x.clone());
        let y = f(&mut tape, v)?;
        let value = tape.value(&y).item()?;
        if !value.is_finite() {
            return Err(Error::numeric(format!("f(x) = {value}")));
        }
        tape.backward(y)?.wrt(v)
    };
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.var(t);
        let y = f(&mut tape, v)?;
        let value = tape.value(&y).item()?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::numeric(format!("non-finite evaluation {value}")))
        }
    };
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    Ok(worst)
}
