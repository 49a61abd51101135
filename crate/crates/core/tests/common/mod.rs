//! Shared helpers for the integration suites: slow high-precision
//! reference implementations (independent of the library's own
//! algorithms) and small dataset builders.

#![allow(dead_code)]

use probseq::data::{Dataset, LatentRule, NoiseModel, Session, SynthSpec};

/// Bernoulli numbers B_2 .. B_40 as exact rationals.
const BERNOULLI: [(f64, f64); 20] = [
    (1.0, 6.0),
    (-1.0, 30.0),
    (1.0, 42.0),
    (-1.0, 30.0),
    (5.0, 66.0),
    (-691.0, 2730.0),
    (7.0, 6.0),
    (-3617.0, 510.0),
    (43867.0, 798.0),
    (-174611.0, 330.0),
    (854513.0, 138.0),
    (-236364091.0, 2730.0),
    (8553103.0, 6.0),
    (-23749461029.0, 870.0),
    (8615841276005.0, 14322.0),
    (-7709321041217.0, 510.0),
    (2577687858367.0, 6.0),
    (-26315271553053477373.0, 1919190.0),
    (2929993913841559.0, 6.0),
    (-261082718496449122051.0, 13530.0),
];

const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_7;

/// Reference log-gamma: lift the argument by the recurrence until it is
/// at least 64, then sum a long Euler-Maclaurin tail. The combined
/// series runs to well over fifty terms for small arguments and its
/// truncation error is far below 1e-40 everywhere, so disagreement at
/// the 1e-10 level can only come from the implementation under test.
pub fn reference_lgamma(x: f64) -> f64 {
    assert!(x > 0.0);
    let mut shift = 0.0;
    let mut y = x;
    while y < 64.0 {
        shift += y.ln();
        y += 1.0;
    }
    let mut tail = 0.0;
    let y2 = y * y;
    let mut power = y; // y^(2n-1)
    for (n, &(num, den)) in BERNOULLI.iter().enumerate() {
        let k = 2.0 * (n + 1) as f64;
        tail += num / den / (k * (k - 1.0) * power);
        power *= y2;
    }
    (y - 0.5) * y.ln() - y + HALF_LN_TWO_PI + tail - shift
}

/// Reference digamma by the same argument-lifting construction.
pub fn reference_digamma(x: f64) -> f64 {
    assert!(x > 0.0);
    let mut shift = 0.0;
    let mut y = x;
    while y < 64.0 {
        shift -= 1.0 / y;
        y += 1.0;
    }
    let mut tail = 0.0;
    let y2 = y * y;
    let mut power = y2; // y^(2n)
    for (n, &(num, den)) in BERNOULLI.iter().enumerate() {
        let k = 2.0 * (n + 1) as f64;
        tail += num / den / (k * power);
        power *= y2;
    }
    y.ln() - 0.5 / y - tail + shift
}

/// Heteroscedastic synthetic spec with the split fractions used by the
/// training-based checks.
pub fn hetero_spec(num_sessions: usize, dim: usize, seed: u64) -> SynthSpec {
    SynthSpec {
        num_sessions,
        t_min: 6,
        t_max: 16,
        dim,
        latent: LatentRule::Linear,
        noise: NoiseModel::Heteroscedastic {
            sigma0: 0.08,
            factor_min: 0.5,
            factor_max: 2.5,
        },
        seed,
        split_weights: (0.6, 0.2, 0.2),
    }
}

/// A dataset whose dev split duplicates its train split, so dev MAE is
/// train MAE and the best-checkpoint restore tracks the training fit.
pub fn duplicated_dev(dataset: &Dataset) -> Dataset {
    let mut sessions = dataset.sessions.clone();
    for s in dataset.sessions.iter() {
        sessions.push(
            Session::new(
                format!("{}-dev", s.id),
                s.embeddings.clone(),
                s.dim,
                s.label,
                probseq::data::Split::Dev,
            )
            .unwrap(),
        );
    }
    Dataset::from_sessions(sessions).unwrap()
}
