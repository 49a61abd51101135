use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Param, Tape};

fn scalar_of(t: &Tensor) -> f64 {
    t.to_scalar().unwrap()
}

fn single(y: f64, mu: f64, sigma: f64, w: &LossWeights) -> f64 {
    let mask = Mask::all_valid(1, 1);
    let loss = gaussian_nll_weighted(
        &Tensor::from_vec(&[1, 1], vec![y]).unwrap(),
        &Tensor::from_vec(&[1, 1], vec![mu]).unwrap(),
        &Tensor::from_vec(&[1, 1], vec![sigma]).unwrap(),
        w,
        &mask,
    )
    .unwrap();
    scalar_of(&loss)
}

// ---- weighted Gaussian NLL ----------------------------------------------------

#[test]
fn weighted_nll_unit_case() {
    let w = LossWeights::default();
    assert!((single(0.0, 0.0, 1.0, &w) - LN_TWO_PI).abs() < 1e-15);
}

#[test]
fn weighted_nll_unit_residual() {
    let w = LossWeights::default();
    assert!((single(1.0, 0.0, 1.0, &w) - (LN_TWO_PI + 1.0)).abs() < 1e-15);
}

#[test]
fn weighted_nll_beta_two() {
    // plug-in: alpha*ln(2pi) + beta*ln(sigma^2) + gamma*delta
    let w = LossWeights::new(1.0, 2.0, 1.0);
    let expect = LN_TWO_PI + 2.0 * 4.0_f64.ln();
    assert!((single(3.0, 3.0, 2.0, &w) - expect).abs() < 1e-12);
}

#[test]
#[allow(clippy::needless_range_loop)]
fn weighted_equals_twice_standard_at_unit_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (b, t) = (3usize, 4usize);
        let lengths = [4usize, 2, 3];
        let mask = Mask::from_lengths(&lengths, t);
        let y: Vec<f64> = (0..b * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu: Vec<f64> = (0..b * t).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..b * t).map(|_| rng.random_range(0.2..2.5)).collect();
        let yt = Tensor::from_vec(&[b, t], y.clone()).unwrap();
        let mt = Tensor::from_vec(&[b, t], mu.clone()).unwrap();
        let st = Tensor::from_vec(&[b, t], sigma.clone()).unwrap();

        let weighted =
            gaussian_nll_weighted(&yt, &mt, &st, &LossWeights::default(), &mask).unwrap();

        for bi in 0..b {
            // independent standard NLL: 0.5*(ln 2pi + ln sigma^2 + delta)
            let mut standard = 0.0;
            for ti in 0..lengths[bi] {
                let i = bi * t + ti;
                let d = (y[i] - mu[i]) / sigma[i];
                standard += 0.5 * (LN_TWO_PI + (sigma[i] * sigma[i]).ln() + d * d);
            }
            let got = weighted.data()[bi];
            assert!(
                (got - 2.0 * standard).abs() < 1e-12,
                "session {bi}: {got} vs 2*{standard}"
            );
        }
    }
}

#[test]
fn nonpositive_sigma_at_valid_position_is_domain_error() {
    let mask = Mask::all_valid(1, 2);
    let y = Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
    let sigma = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    assert!(matches!(
        gaussian_nll_weighted(&y, &y, &sigma, &LossWeights::default(), &mask),
        Err(Error::Domain { .. })
    ));
}

#[test]
fn padded_positions_contribute_exactly_zero() {
    let mask = Mask::from_lengths(&[2], 4);
    let y = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 0.0, 0.0]).unwrap();
    let mu = Tensor::from_vec(&[1, 4], vec![0.5, 1.5, 0.0, 0.0]).unwrap();
    let sigma = Tensor::from_vec(&[1, 4], vec![0.8, 1.2, 1.0, 1.0]).unwrap();
    let base = gaussian_nll_weighted(&y, &mu, &sigma, &LossWeights::default(), &mask).unwrap();

    // perturb everything in the padded region, including nonpositive sigma
    let y2 = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 99.0, -5.0]).unwrap();
    let mu2 = Tensor::from_vec(&[1, 4], vec![0.5, 1.5, -7.0, 3.0]).unwrap();
    let sigma2 = Tensor::from_vec(&[1, 4], vec![0.8, 1.2, -2.0, 0.0]).unwrap();
    let perturbed =
        gaussian_nll_weighted(&y2, &mu2, &sigma2, &LossWeights::default(), &mask).unwrap();
    assert_eq!(base.data()[0].to_bits(), perturbed.data()[0].to_bits());

    let st_base = student_t_nll(
        &y,
        &mu,
        &sigma,
        &Tensor::from_vec(&[1, 4], vec![3.0, 5.0, 1.0, 1.0]).unwrap(),
        &mask,
    )
    .unwrap();
    let st_perturbed = student_t_nll(
        &y2,
        &mu2,
        &sigma2,
        &Tensor::from_vec(&[1, 4], vec![3.0, 5.0, -4.0, 0.0]).unwrap(),
        &mask,
    )
    .unwrap();
    assert_eq!(st_base.data()[0].to_bits(), st_perturbed.data()[0].to_bits());

    let mse_base = mse_masked(&y, &mu, &mask).unwrap();
    let mse_perturbed = mse_masked(&y2, &mu2, &mask).unwrap();
    assert_eq!(scalar_of(&mse_base).to_bits(), scalar_of(&mse_perturbed).to_bits());
}

// ---- Student-t NLL ---------------------------------------------------------------

fn single_t(y: f64, mu: f64, sigma: f64, nu: f64) -> f64 {
    let mask = Mask::all_valid(1, 1);
    let loss = student_t_nll(
        &Tensor::from_vec(&[1, 1], vec![y]).unwrap(),
        &Tensor::from_vec(&[1, 1], vec![mu]).unwrap(),
        &Tensor::from_vec(&[1, 1], vec![sigma]).unwrap(),
        &Tensor::from_vec(&[1, 1], vec![nu]).unwrap(),
        &mask,
    )
    .unwrap();
    scalar_of(&loss)
}

#[test]
fn student_t_cauchy_peak() {
    // nu = 1 is Cauchy; density at the peak is 1/pi
    let expect = std::f64::consts::PI.ln();
    assert!((single_t(0.0, 0.0, 1.0, 1.0) - expect).abs() < 1e-12);
}

#[test]
fn student_t_cauchy_unit_offset() {
    // Cauchy density at |y - mu| = 1 is 1/(2 pi)
    assert!((single_t(1.0, 0.0, 1.0, 1.0) - LN_TWO_PI).abs() < 1e-12);
}

#[test]
fn student_t_converges_to_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut last_worst = f64::INFINITY;
    for &nu in &[1e2, 1e4, 1e6] {
        let mut worst: f64 = 0.0;
        for _ in 0..40 {
            let r = rng.random_range(-3.0..3.0);
            let t_nll = single_t(r, 0.0, 1.0, nu);
            let g_nll = 0.5 * LN_TWO_PI + 0.5 * r * r;
            worst = worst.max((t_nll - g_nll).abs());
        }
        assert!(worst < last_worst, "not monotone at nu={nu}");
        last_worst = worst;
    }
    assert!(last_worst < 1e-4, "worst gap {last_worst} at nu=1e6");
}

// ---- MSE / MAE ----------------------------------------------------------------------

#[test]
fn exact_fit_is_zero() {
    let mask = Mask::all_valid(1, 3);
    let y = Tensor::from_vec(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    assert_eq!(scalar_of(&mse_masked(&y, &y, &mask).unwrap()), 0.0);
    assert_eq!(scalar_of(&mae_masked(&y, &y, &mask).unwrap()), 0.0);
}

#[test]
fn symmetric_residuals() {
    let mask = Mask::all_valid(1, 2);
    let y = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
    let mu = Tensor::zeros(&[1, 2]);
    assert_eq!(scalar_of(&mse_masked(&y, &mu, &mask).unwrap()), 1.0);
    assert_eq!(scalar_of(&mae_masked(&y, &mu, &mask).unwrap()), 1.0);
}

#[test]
fn masked_residuals_from_hand_arithmetic() {
    let mask = Mask::new(1, 3, vec![true, false, true]).unwrap();
    let y = Tensor::from_vec(&[1, 3], vec![3.0, 0.0, 4.0]).unwrap();
    let mu = Tensor::zeros(&[1, 3]);
    assert_eq!(scalar_of(&mse_masked(&y, &mu, &mask).unwrap()), 12.5);
    assert_eq!(scalar_of(&mae_masked(&y, &mu, &mask).unwrap()), 3.5);
}

// ---- batch reduction ------------------------------------------------------------------

#[test]
fn batch_loss_single_session() {
    let per = Tensor::from_vec(&[1], vec![6.0]).unwrap();
    assert_eq!(scalar_of(&batch_loss(&per, &[3]).unwrap()), 2.0);
}

#[test]
fn batch_loss_plug_in() {
    let per = Tensor::from_vec(&[2], vec![4.0, 6.0]).unwrap();
    assert_eq!(scalar_of(&batch_loss(&per, &[2, 3]).unwrap()), 2.0);
}

#[test]
fn batch_loss_seq2one_is_plain_mean() {
    let per = Tensor::from_vec(&[2], vec![1.0, 3.0]).unwrap();
    assert_eq!(scalar_of(&batch_loss(&per, &[1, 1]).unwrap()), 2.0);
}

#[test]
fn batch_loss_rejects_zero_length() {
    let per = Tensor::from_vec(&[1], vec![1.0]).unwrap();
    assert!(matches!(batch_loss(&per, &[0]), Err(Error::EmptySession { .. })));
}

// ---- evaluation NLL --------------------------------------------------------------------

fn output_of(mu: Vec<f64>, sigma: Vec<f64>, mask: Mask) -> PredictiveOutput {
    let shape = [mask.batch(), mask.steps()];
    PredictiveOutput {
        family: Family::Gaussian,
        mode: crate::model::Mode::Seq2Seq,
        mu: Tensor::from_vec(&shape, mu).unwrap(),
        sigma: Some(Tensor::from_vec(&shape, sigma).unwrap()),
        nu: None,
        mask,
    }
}

#[test]
fn eval_nll_reference_values() {
    let out = output_of(vec![0.0], vec![1.0], Mask::all_valid(1, 1));
    let nll = eval_nll(&[0.0], &out).unwrap();
    assert!((nll - 0.5 * LN_TWO_PI).abs() < 1e-15);

    let out = output_of(vec![0.0], vec![1.0], Mask::all_valid(1, 1));
    let nll = eval_nll(&[1.0], &out).unwrap();
    assert!((nll - (0.5 * LN_TWO_PI + 0.5)).abs() < 1e-15);
}

#[test]
fn eval_nll_requires_sigma() {
    let mask = Mask::all_valid(1, 1);
    let out = PredictiveOutput {
        family: Family::Gaussian,
        mode: crate::model::Mode::Seq2One,
        mu: Tensor::zeros(&[1, 1]),
        sigma: None,
        nu: None,
        mask,
    };
    assert!(matches!(
        eval_nll(&[0.0], &out),
        Err(Error::UnsupportedMetric(_))
    ));
}

#[test]
fn eval_nll_is_independent_of_loss_weights() {
    // the metric has no weight inputs at all; spot-check it against the
    // weighted loss: halving gamma changes the training loss but not the
    // reported NLL
    let mask = Mask::all_valid(1, 2);
    let y = [1.5];
    let out = output_of(vec![1.0, 2.0], vec![0.7, 1.1], mask.clone());
    let metric = eval_nll(&y, &out).unwrap();

    let yt = Tensor::from_vec(&[1, 2], vec![1.5, 1.5]).unwrap();
    let l1 = gaussian_nll_weighted(&yt, &out.mu, out.sigma.as_ref().unwrap(), &LossWeights::default(), &mask).unwrap();
    let l2 = gaussian_nll_weighted(
        &yt,
        &out.mu,
        out.sigma.as_ref().unwrap(),
        &LossWeights::new(1.0, 1.0, 0.5),
        &mask,
    )
    .unwrap();
    assert!(scalar_of(&l1.sum_all()) != scalar_of(&l2.sum_all()));
    let metric_again = eval_nll(&y, &out).unwrap();
    assert_eq!(metric.to_bits(), metric_again.to_bits());
}

// ---- gradient behaviour -------------------------------------------------------------------

#[test]
fn nll_gradients_vanish_at_mu_equals_y() {
    for family in ["gaussian", "student"] {
        let mu = Param::new("mu", &[1, 1], vec![1.7]).unwrap();
        let sigma = Param::new("sigma", &[1, 1], vec![0.9]).unwrap();
        let nu = Param::new("nu", &[1, 1], vec![4.0]).unwrap();
        let mask = Mask::all_valid(1, 1);
        let y = Tensor::from_vec(&[1, 1], vec![1.7]).unwrap();
        let tape = Tape::new();
        let loss = match family {
            "gaussian" => gaussian_nll_weighted(
                &y,
                &tape.watch(&mu),
                &tape.watch(&sigma),
                &LossWeights::default(),
                &mask,
            )
            .unwrap(),
            _ => student_t_nll(&y, &tape.watch(&mu), &tape.watch(&sigma), &tape.watch(&nu), &mask)
                .unwrap(),
        };
        loss.sum_all().backward().unwrap();
        assert!(
            mu.grad()[0].abs() < 1e-12,
            "{family}: d/dmu at mu=y is {}",
            mu.grad()[0]
        );

        // finite differences agree
        let fd = crate::autodiff::gradcheck::central_difference(
            |m| {
                let mt = Tensor::from_vec(&[1, 1], vec![m]).unwrap();
                let st = Tensor::from_vec(&[1, 1], vec![0.9]).unwrap();
                let nt = Tensor::from_vec(&[1, 1], vec![4.0]).unwrap();
                let l = match family {
                    "gaussian" => gaussian_nll_weighted(
                        &y,
                        &mt,
                        &st,
                        &LossWeights::default(),
                        &Mask::all_valid(1, 1),
                    )
                    .unwrap(),
                    _ => student_t_nll(&y, &mt, &st, &nt, &Mask::all_valid(1, 1)).unwrap(),
                };
                l.data()[0]
            },
            1.7,
            1e-5,
        );
        assert!(fd.abs() < 1e-8);
    }
}

#[test]
fn loss_gradients_pass_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for seed in 0..5 {
        let _ = seed;
        let (b, t) = (2usize, 3usize);
        let mask = Mask::from_lengths(&[3, 2], t);
        let y = Tensor::from_vec(&[b, t], (0..b * t).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let mu = Param::new("mu", &[b, t], (0..b * t).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap();
        let sigma_raw =
            Param::new("sigma_raw", &[b, t], (0..b * t).map(|_| rng.random_range(-1.0..1.5)).collect())
                .unwrap();
        let nu_raw =
            Param::new("nu_raw", &[b, t], (0..b * t).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        let lengths = [3usize, 2];

        crate::autodiff::gradcheck::check_param_gradients(
            &[mu.clone(), sigma_raw.clone()],
            |tape| {
                let sigma = tape.watch(&sigma_raw).softplus().add_scalar(1e-6);
                let per = gaussian_nll_weighted(
                    &y,
                    &tape.watch(&mu),
                    &sigma,
                    &LossWeights::new(1.0, 1.3, 0.8),
                    &mask,
                )?;
                batch_loss(&per, &lengths)
            },
            1e-5,
            1e-4,
            1e-7,
        )
        .unwrap();

        crate::autodiff::gradcheck::check_param_gradients(
            &[mu.clone(), sigma_raw.clone(), nu_raw.clone()],
            |tape| {
                let sigma = tape.watch(&sigma_raw).softplus().add_scalar(1e-6);
                let nu = tape.watch(&nu_raw).softplus().add_scalar(2.0);
                let per = student_t_nll(&y, &tape.watch(&mu), &sigma, &nu, &mask)?;
                batch_loss(&per, &lengths)
            },
            1e-5,
            1e-4,
            1e-7,
        )
        .unwrap();
    }
}

#[test]
fn alpha_never_touches_gradients() {
    let mu = Param::new("mu", &[1, 2], vec![0.3, -0.4]).unwrap();
    let sigma_raw = Param::new("s", &[1, 2], vec![0.2, 0.1]).unwrap();
    let y = Tensor::from_vec(&[1, 2], vec![1.0, -1.0]).unwrap();
    let mask = Mask::all_valid(1, 2);
    let grads_for = |alpha: f64| {
        mu.zero_grad();
        sigma_raw.zero_grad();
        let tape = Tape::new();
        let sigma = tape.watch(&sigma_raw).softplus().add_scalar(1e-6);
        let per = gaussian_nll_weighted(
            &y,
            &tape.watch(&mu),
            &sigma,
            &LossWeights::new(alpha, 1.0, 1.0),
            &mask,
        )
        .unwrap();
        batch_loss(&per, &[2]).unwrap().backward().unwrap();
        let grads = (mu.grad().clone(), sigma_raw.grad().clone());
        grads
    };
    let g1 = grads_for(1.0);
    let g5 = grads_for(5.0);
    assert_eq!(g1.0, g5.0);
    assert_eq!(g1.1, g5.1);
}
