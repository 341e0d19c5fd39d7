//! Central-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function against central differences.
///
/// `f` builds the function on a fresh tape from the input variable. Returns the
/// maximum over coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; point.numel()],
    };
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(p);
        let y = f(&mut t, x)?;
        let v = t.value(y);
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = (eval(plus)?, eval(minus)?);
        let numeric = (fp - fm) / (2.0 * step);
        for value in [a, fp, fm, numeric] {
            if !value.is_finite() {
                return Err(Error::NonFinite { index: i, value });
            }
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Gradient check over several inputs at once; returns the worst error over all of them.
pub fn grad_check_many<F>(f: F, points: &[Tensor<f64>], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut worst: f64 = 0.0;
    for which in 0..points.len() {
        let err = grad_check(
            |tape, x| {
                let vars: Vec<Var> = points
                    .iter()
                    .enumerate()
                    .map(|(j, p)| if j == which { x } else { tape.constant(p.clone()) })
                    .collect();
                f(tape, &vars)
            },
            &points[which],
            step,
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}
