//! Central-finite-difference oracle for the reverse pass.
//!
//! Points where the function is not differentiable (e.g. a ReLU kink landing
//! exactly on a coordinate) are excluded by contract: callers must probe at
//! generic positions, which the randomized tests do by construction.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Max over coordinates of `|analytic - central difference| / (|analytic| + 1e-8)`.
///
/// `f` must build a scalar output from the given leaf; it is re-evaluated
/// `2 * numel` times at perturbed points, so keep probe tensors small.
pub fn finite_diff_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite_diff_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let y = f(&mut tape, x)?;
    if tape.data(y).len() != 1 {
        return Err(Error::invalid(
            "finite_diff_check: function must be scalar-valued",
        ));
    }
    if !tape.data(y)[0].is_finite() {
        return Err(Error::non_finite("finite_diff_check: function value"));
    }
    tape.backward(y)?;
    let analytic = tape.grad_tensor(x);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(probe, false);
        let yv = f(&mut t, xv)?;
        let v = t.data(yv)[0];
        if !v.is_finite() {
            return Err(Error::non_finite("finite_diff_check: function value"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

/// Like [`finite_diff_check`] but probing only the given coordinates; used
/// when a full sweep over every input pixel would be too slow.
pub fn finite_diff_check_subset<F>(
    f: F,
    point: &Tensor<f64>,
    step: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite_diff_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point, true);
    let y = f(&mut tape, x)?;
    if tape.data(y).len() != 1 {
        return Err(Error::invalid(
            "finite_diff_check: function must be scalar-valued",
        ));
    }
    tape.backward(y)?;
    let analytic = tape.grad_tensor(x);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let xv = t.leaf(probe, false);
        let yv = f(&mut t, xv)?;
        let v = t.data(yv)[0];
        if !v.is_finite() {
            return Err(Error::non_finite("finite_diff_check: function value"));
        }
        Ok(v)
    };

    let mut max_rel = 0.0f64;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / (a.abs() + 1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}
