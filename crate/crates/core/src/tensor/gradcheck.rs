use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`; any non-finite
/// value along the way yields `+inf`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let root = f(&mut tape, xv)?;
    if !tape.value(root).all_finite() {
        return Ok(f64::INFINITY);
    }
    tape.backward(root)?;
    let analytic = tape.grad(xv).expect("x requires grad");

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let r = f(&mut t, v)?;
        Ok(t.value(r).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Ok(f64::INFINITY);
        }
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
