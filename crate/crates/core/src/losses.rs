//! Training objectives and the evaluation log-density.
//!
//! The weighted Gaussian objective used for training is
//! `sum_t [ alpha*log(2*pi) + beta*log(sigma_t^2) + gamma*delta_t ]`
//! with `delta_t = (y_t - mu_t)^2 / sigma_t^2`, summed over the valid
//! positions of each session. At weights (1,1,1) this is exactly twice
//! the standard Gaussian negative log-density; the standard form (with
//! its 1/2 factors) is what [`eval_nll`] reports as a metric, so the two
//! are deliberately separate functions.
//!
//! All losses consume a validity mask and are exactly invariant to the
//! values stored at padded positions.

use serde::{Deserialize, Serialize};

use crate::autodiff::special::lgamma;
use crate::autodiff::{Mask, Tensor};
use crate::error::{Error, Result};
use crate::model::{Family, PredictiveOutput};

pub const LN_TWO_PI: f64 = 1.837_877_066_409_345_3;

/// Trade-off weights of the weighted Gaussian objective; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> LossWeights {
        LossWeights { alpha, beta, gamma }
    }
}

/// Which objective drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    GaussianNll,
    StudentTNll,
    Mse,
    Mae,
}

fn check_same_shape(op: &'static str, y: &Tensor, mu: &Tensor, mask: &Mask) -> Result<()> {
    if y.shape() != mu.shape() || y.shape() != [mask.batch(), mask.steps()] {
        return Err(Error::Shape {
            op,
            detail: format!(
                "y {:?}, mu {:?}, mask {}x{}",
                y.shape(),
                mu.shape(),
                mask.batch(),
                mask.steps()
            ),
        });
    }
    Ok(())
}

/// Require strictly positive values at every valid position.
fn check_positive_at_valid(op: &'static str, t: &Tensor, mask: &Mask) -> Result<()> {
    let steps = mask.steps();
    for (i, &v) in t.data().iter().enumerate() {
        if mask.valid(i / steps, i % steps) && v <= 0.0 {
            return Err(Error::Domain { op, index: i, value: v });
        }
    }
    Ok(())
}

/// Replace padded positions with 1.0 so logs and divisions stay inside
/// their domain; valid positions pass through untouched and padded ones
/// carry zero gradient.
fn neutralize_padding(t: &Tensor, maskf: &Tensor, pad_ones: &Tensor) -> Result<Tensor> {
    t.mul(maskf)?.add(pad_ones)
}

/// Weighted Gaussian negative log-likelihood, summed over the valid
/// positions of each session: returns a `[B]` tensor of per-session sums
/// (feed through [`batch_loss`] for the participant-normalized scalar).
pub fn gaussian_nll_weighted(
    y: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    weights: &LossWeights,
    mask: &Mask,
) -> Result<Tensor> {
    check_same_shape("gaussian_nll_weighted", y, mu, mask)?;
    check_same_shape("gaussian_nll_weighted", sigma, mu, mask)?;
    check_positive_at_valid("gaussian_nll_weighted", sigma, mask)?;
    let maskf = mask.to_tensor();
    let pad_ones = maskf.affine(-1.0, 1.0);
    let sigma_safe = neutralize_padding(sigma, &maskf, &pad_ones)?;
    let var = sigma_safe.square();
    let delta = y.sub(mu)?.square().div(&var)?;
    let term = var
        .log()?
        .affine(weights.beta, weights.alpha * LN_TWO_PI)
        .add(&delta.mul_scalar(weights.gamma))?;
    term.mul(&maskf)?.sum_axis1()
}

/// Student-t negative log-likelihood (standard density), summed over
/// valid positions per session; `[B]` output like the Gaussian form.
pub fn student_t_nll(
    y: &Tensor,
    mu: &Tensor,
    sigma: &Tensor,
    nu: &Tensor,
    mask: &Mask,
) -> Result<Tensor> {
    check_same_shape("student_t_nll", y, mu, mask)?;
    check_same_shape("student_t_nll", sigma, mu, mask)?;
    check_same_shape("student_t_nll", nu, mu, mask)?;
    check_positive_at_valid("student_t_nll", sigma, mask)?;
    check_positive_at_valid("student_t_nll", nu, mask)?;
    let maskf = mask.to_tensor();
    let pad_ones = maskf.affine(-1.0, 1.0);
    let sigma_safe = neutralize_padding(sigma, &maskf, &pad_ones)?;
    let nu_safe = neutralize_padding(nu, &maskf, &pad_ones)?;

    let half_nu_plus = nu_safe.affine(0.5, 0.5);
    let half_nu = nu_safe.affine(0.5, 0.0);
    let z2 = y.sub(mu)?.square().div(&sigma_safe.square())?;
    let tail = z2.div(&nu_safe)?.add_scalar(1.0).log()?.mul(&half_nu_plus)?;
    let term = half_nu_plus
        .lgamma()?
        .neg()
        .add(&half_nu.lgamma()?)?
        .add(&nu_safe.mul_scalar(std::f64::consts::PI).log()?.mul_scalar(0.5))?
        .add(&sigma_safe.log()?)?
        .add(&tail)?;
    term.mul(&maskf)?.sum_axis1()
}

/// Per-session sums of squared residuals over valid positions (`[B]`).
pub fn squared_error_per_session(y: &Tensor, mu: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_same_shape("squared_error", y, mu, mask)?;
    y.sub(mu)?.square().mul(&mask.to_tensor())?.sum_axis1()
}

/// Per-session sums of absolute residuals over valid positions (`[B]`).
pub fn absolute_error_per_session(y: &Tensor, mu: &Tensor, mask: &Mask) -> Result<Tensor> {
    check_same_shape("absolute_error", y, mu, mask)?;
    y.sub(mu)?.abs().mul(&mask.to_tensor())?.sum_axis1()
}

fn total_valid(mask: &Mask) -> usize {
    (0..mask.batch()).map(|b| mask.count(b)).sum()
}

/// Mean squared residual over every valid position of the batch.
pub fn mse_masked(y: &Tensor, mu: &Tensor, mask: &Mask) -> Result<Tensor> {
    let n = total_valid(mask);
    if n == 0 {
        return Err(Error::EmptySession {
            id: "every position masked".into(),
        });
    }
    Ok(squared_error_per_session(y, mu, mask)?
        .sum_all()
        .mul_scalar(1.0 / n as f64))
}

/// Mean absolute residual over every valid position of the batch.
pub fn mae_masked(y: &Tensor, mu: &Tensor, mask: &Mask) -> Result<Tensor> {
    let n = total_valid(mask);
    if n == 0 {
        return Err(Error::EmptySession {
            id: "every position masked".into(),
        });
    }
    Ok(absolute_error_per_session(y, mu, mask)?
        .sum_all()
        .mul_scalar(1.0 / n as f64))
}

/// Participant-normalized batch reduction:
/// `(1/B) * sum_i per_session[i] / lengths[i]`. For seq2one every
/// length is 1 and this is the plain mean.
pub fn batch_loss(per_session: &Tensor, lengths: &[usize]) -> Result<Tensor> {
    if per_session.shape() != [lengths.len()] {
        return Err(Error::Shape {
            op: "batch_loss",
            detail: format!("{:?} losses vs {} lengths", per_session.shape(), lengths.len()),
        });
    }
    let b = lengths.len();
    let mut scale = Vec::with_capacity(b);
    for (i, &len) in lengths.iter().enumerate() {
        if len == 0 {
            return Err(Error::EmptySession {
                id: format!("batch row {i}"),
            });
        }
        scale.push(1.0 / (b as f64 * len as f64));
    }
    Ok(per_session.mul(&Tensor::from_vec(&[b], scale)?)?.sum_all())
}

/// Standard negative log-density of one observation.
pub fn point_nll(family: Family, y: f64, mu: f64, sigma: f64, nu: Option<f64>) -> f64 {
    let z = (y - mu) / sigma;
    match family {
        Family::Gaussian => 0.5 * LN_TWO_PI + sigma.ln() + 0.5 * z * z,
        Family::StudentT => {
            let nu = nu.expect("student_t needs nu");
            -lgamma(0.5 * (nu + 1.0))
                + lgamma(0.5 * nu)
                + 0.5 * (nu * std::f64::consts::PI).ln()
                + sigma.ln()
                + 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
        }
    }
}

/// Reported NLL metric: mean standard negative log-density over valid
/// positions, independent of the training loss weights. Labels are per
/// session; for seq2seq they broadcast across that session's steps.
pub fn eval_nll(labels: &[f64], output: &PredictiveOutput) -> Result<f64> {
    let sigma = output.sigma.as_ref().ok_or_else(|| {
        Error::UnsupportedMetric("NLL requires a probabilistic output (no sigma present)".into())
    })?;
    let mask = &output.mask;
    if labels.len() != mask.batch() {
        return Err(Error::Shape {
            op: "eval_nll",
            detail: format!("{} labels for batch of {}", labels.len(), mask.batch()),
        });
    }
    let steps = mask.steps();
    let mut total = 0.0;
    let mut count = 0usize;
    #[allow(clippy::needless_range_loop)]
    for b in 0..mask.batch() {
        for t in 0..steps {
            if !mask.valid(b, t) {
                continue;
            }
            let idx = b * steps + t;
            let nu = output.nu.as_ref().map(|n| n.data()[idx]);
            total += point_nll(
                output.family,
                labels[b],
                output.mu.data()[idx],
                sigma.data()[idx],
                nu,
            );
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptySession {
            id: "every position masked".into(),
        });
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests;
