//! Log-gamma and digamma on the positive reals.
//!
//! `lgamma` uses the Lanczos approximation (g = 7, 9 coefficients);
//! `digamma` lifts small arguments with the recurrence
//! psi(x) = psi(x + 1) - 1/x and evaluates an asymptotic tail. Both are
//! defined for x > 0 only; the positivity constraints elsewhere in the
//! crate (sigma, nu) mean negative arguments never arise, so no
//! reflection formulas are needed.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Natural log of the gamma function for `x > 0`; NaN outside the domain.
pub fn lgamma(x: f64) -> f64 {
    if x <= 0.0 || x.is_nan() {
        return f64::NAN;
    }
    // Lanczos is formulated for arguments >= 0.5; lift smaller ones
    // through Gamma(x) = Gamma(x + 1) / x.
    if x < 0.5 {
        return lgamma(x + 1.0) - x.ln();
    }
    let z = x - 1.0;
    let mut series = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        series += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_TWO_PI + (z + 0.5) * t.ln() - t + series.ln()
}

/// Checked log-gamma: `x <= 0` is a domain error.
pub fn try_lgamma(x: f64) -> Result<f64> {
    if x <= 0.0 || !x.is_finite() {
        return Err(Error::Domain {
            op: "lgamma",
            index: 0,
            value: x,
        });
    }
    Ok(lgamma(x))
}

// Asymptotic tail coefficients: Bernoulli(2n) / 2n for n = 1..=7.
const DIGAMMA_TAIL: [f64; 7] = [
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
];

/// Derivative of `lgamma` for `x > 0`; NaN outside the domain.
pub fn digamma(x: f64) -> f64 {
    if x <= 0.0 || x.is_nan() {
        return f64::NAN;
    }
    let mut shift = 0.0;
    let mut y = x;
    while y < 10.0 {
        shift -= 1.0 / y;
        y += 1.0;
    }
    // psi(y) ~ ln y - 1/(2y) - sum B_{2n} / (2n y^{2n})
    let inv2 = 1.0 / (y * y);
    let mut tail = 0.0;
    let mut pow = inv2;
    for &c in DIGAMMA_TAIL.iter() {
        tail += c * pow;
        pow *= inv2;
    }
    shift + y.ln() - 0.5 / y - tail
}

/// Checked digamma: `x <= 0` is a domain error.
pub fn try_digamma(x: f64) -> Result<f64> {
    if x <= 0.0 || !x.is_finite() {
        return Err(Error::Domain {
            op: "digamma",
            index: 0,
            value: x,
        });
    }
    Ok(digamma(x))
}
