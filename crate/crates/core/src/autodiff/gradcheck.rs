//! Central finite-difference gradient verification.
//!
//! The checks here evaluate the loss function twice per parameter
//! element, so they are strictly independent of the backward sweep they
//! validate. Intended for tests, but public: verifying a custom op
//! composition is a legitimate user task.

use super::tape::{Param, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Derivative of a scalar function by central differences.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Compare the tape gradient of `forward` against central finite
/// differences, element by element, for every listed parameter.
///
/// `forward` must rebuild its computation from scratch on the given
/// tape (watching the parameters it uses) and return a scalar loss.
/// An element fails when `|fd - analytic|` exceeds
/// `abs_floor + rel_tol * max(|fd|, |analytic|)`.
pub fn check_param_gradients<F>(
    params: &[Param],
    mut forward: F,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<()>
where
    F: FnMut(&Tape) -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let tape = Tape::new();
    let loss = forward(&tape)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().clone()).collect();

    for (pi, p) in params.iter().enumerate() {
        let base = p.value().clone();
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            p.set_value(plus);
            let lp = forward(&Tape::new())?.to_scalar()?;

            let mut minus = base.clone();
            minus[i] -= step;
            p.set_value(minus);
            let lm = forward(&Tape::new())?.to_scalar()?;

            p.set_value(base.clone());

            let fd = (lp - lm) / (2.0 * step);
            let an = analytic[pi][i];
            let tol = abs_floor + rel_tol * fd.abs().max(an.abs());
            if (fd - an).abs() > tol {
                return Err(Error::Contract(format!(
                    "gradient mismatch for {}[{}]: finite-difference {fd:.9e} vs analytic {an:.9e} (tol {tol:.3e})",
                    p.name(),
                    i
                )));
            }
        }
    }
    Ok(())
}
