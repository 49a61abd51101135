//! Optimization loop: Adam under a single cosine decay of the learning
//! rate, early stopping on dev MAE with best-checkpoint restore, and the
//! log1p target transform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Tensor};
use crate::data::{make_batches, Batch, Dataset, Session, Split};
use crate::error::{Error, Result};
use crate::losses::{
    absolute_error_per_session, batch_loss, eval_nll, gaussian_nll_weighted,
    squared_error_per_session, student_t_nll, LossKind, LossWeights,
};
use crate::model::{Mode, PredictiveOutput, SequenceRegressor};

/// Target transform applied during training; predictions are mapped
/// back before metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Log1p,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub weights: LossWeights,
    pub transform: TransformKind,
    /// Global-norm gradient clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr_max: 2e-4,
            lr_min: 1e-4,
            patience: 15,
            batch_size: 8,
            seed: 0,
            loss: LossKind::GaussianNll,
            weights: LossWeights::default(),
            transform: TransformKind::Log1p,
            grad_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Single smooth cosine decay from `lr_max` at epoch 0 to `lr_min` at
/// the final epoch; no warm restarts.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside schedule of {} epochs",
            cfg.epochs
        )));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_max);
    }
    let progress = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ---- target transform --------------------------------------------------------

pub fn transform_targets(y: &[f64], tag: TransformKind) -> Result<Vec<f64>> {
    match tag {
        TransformKind::Identity => Ok(y.to_vec()),
        TransformKind::Log1p => y
            .iter()
            .map(|&v| {
                if v < 0.0 {
                    Err(Error::Domain {
                        op: "log1p_transform",
                        index: 0,
                        value: v,
                    })
                } else {
                    Ok(v.ln_1p())
                }
            })
            .collect(),
    }
}

/// Map a model-space point prediction back to the label scale. This is
/// a median-style back-transform: monotone, so interval endpoints and
/// coverage counts carry over unchanged.
pub fn invert_prediction(v: f64, tag: TransformKind) -> f64 {
    match tag {
        TransformKind::Identity => v,
        TransformKind::Log1p => v.exp_m1(),
    }
}

// ---- Adam ----------------------------------------------------------------------

/// Adam with bias correction; one moment pair per parameter tensor, in
/// parameter-set order.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently accumulated in the
    /// parameters. A non-finite gradient aborts with a numeric fault.
    pub fn step(&mut self, params: &ParamSet, lr: f64) -> Result<()> {
        if params.any_non_finite_grad() {
            return Err(Error::NumericFault {
                op: "adam_step (non-finite gradient)".into(),
            });
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter().enumerate() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            p.update(|value, grad| {
                for j in 0..value.len() {
                    let g = grad[j];
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    value[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
        }
        Ok(())
    }
}

// ---- training loop ----------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_mae: f64,
    pub dev_rmse: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_mae: f64,
    pub stopped_early: bool,
}

/// Labels of a batch in model space, shaped to match the output mask.
fn target_tensor(batch: &Batch, mode: Mode, transform: TransformKind) -> Result<Tensor> {
    let transformed = transform_targets(&batch.labels, transform)?;
    match mode {
        Mode::Seq2One => Tensor::from_vec(&[batch.batch, 1], transformed),
        Mode::Seq2Seq => {
            let mut data = Vec::with_capacity(batch.batch * batch.t_max);
            for &label in &transformed {
                data.extend(std::iter::repeat_n(label, batch.t_max));
            }
            Tensor::from_vec(&[batch.batch, batch.t_max], data)
        }
    }
}

/// Loss-normalization lengths: valid steps for seq2seq, 1 for seq2one.
fn loss_lengths(batch: &Batch, mode: Mode) -> Vec<usize> {
    match mode {
        Mode::Seq2Seq => batch.lengths.clone(),
        Mode::Seq2One => vec![1; batch.batch],
    }
}

fn training_loss(
    output: &PredictiveOutput,
    targets: &Tensor,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<Tensor> {
    let per_session = match cfg.loss {
        LossKind::GaussianNll => {
            let sigma = output.sigma.as_ref().ok_or_else(|| {
                Error::UnsupportedMetric("gaussian_nll needs a variance head".into())
            })?;
            gaussian_nll_weighted(targets, &output.mu, sigma, &cfg.weights, &output.mask)?
        }
        LossKind::StudentTNll => {
            let sigma = output.sigma.as_ref().ok_or_else(|| {
                Error::UnsupportedMetric("student_t_nll needs a variance head".into())
            })?;
            let nu = output.nu.as_ref().ok_or_else(|| {
                Error::UnsupportedMetric("student_t_nll needs a degrees-of-freedom head".into())
            })?;
            student_t_nll(targets, &output.mu, sigma, nu, &output.mask)?
        }
        LossKind::Mse => squared_error_per_session(targets, &output.mu, &output.mask)?,
        LossKind::Mae => absolute_error_per_session(targets, &output.mu, &output.mask)?,
    };
    batch_loss(&per_session, &loss_lengths(batch, output.mode))
}

/// Pooled MAE and RMSE on the original label scale, over all valid
/// output positions of the given sessions.
pub fn evaluate_point(
    model: &SequenceRegressor,
    sessions: &[&Session],
    transform: TransformKind,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for chunk in sessions.chunks(batch_size.max(1)) {
        let batch = Batch::from_sessions(chunk)?;
        let out = model.forward(&Tape::new(), &batch)?;
        let steps = out.mask.steps();
        for b in 0..out.mask.batch() {
            for t in 0..steps {
                if !out.mask.valid(b, t) {
                    continue;
                }
                let pred = invert_prediction(out.mu.data()[b * steps + t], transform);
                let err = batch.labels[b] - pred;
                abs_sum += err.abs();
                sq_sum += err * err;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptySession {
            id: "no valid positions in evaluation set".into(),
        });
    }
    let n = count as f64;
    Ok((abs_sum / n, (sq_sum / n).sqrt()))
}

/// Mean standard NLL in model space (transformed targets when a
/// transform is active), over all valid output positions.
pub fn evaluate_nll(
    model: &SequenceRegressor,
    sessions: &[&Session],
    transform: TransformKind,
    batch_size: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in sessions.chunks(batch_size.max(1)) {
        let batch = Batch::from_sessions(chunk)?;
        let out = model.forward(&Tape::new(), &batch)?;
        let labels = transform_targets(&batch.labels, transform)?;
        let per_position = eval_nll(&labels, &out)?;
        let positions: usize = (0..out.mask.batch()).map(|b| out.mask.count(b)).sum();
        total += per_position * positions as f64;
        count += positions;
    }
    if count == 0 {
        return Err(Error::EmptySession {
            id: "no valid positions in evaluation set".into(),
        });
    }
    Ok(total / count as f64)
}

/// Train on the train split, early-stop on dev MAE (original scale),
/// restore the best checkpoint, and report per-epoch history.
pub fn fit(model: &SequenceRegressor, dataset: &Dataset, cfg: &TrainConfig) -> Result<FitReport> {
    cfg.validate()?;
    let train = dataset.split(Split::Train);
    let dev = dataset.split(Split::Dev);
    if train.is_empty() {
        return Err(Error::Config("dataset has no train split".into()));
    }
    if dev.is_empty() {
        return Err(Error::Config("dataset has no dev split".into()));
    }

    let params = model.params();
    let mut adam = Adam::new(params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9));

    let mut history = Vec::new();
    let mut best_mae = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snapshot = params.snapshot();
    let mut wait = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg)?;
        let epoch_seed: u64 = shuffle_rng.random();
        let batches = make_batches(&train, cfg.batch_size, epoch_seed)?;
        let mut loss_sum = 0.0;
        for batch in &batches {
            params.zero_grad();
            let tape = Tape::new();
            let output = model.forward_train(&tape, batch, &mut dropout_rng)?;
            let targets = target_tensor(batch, output.mode, cfg.transform)?;
            let loss = training_loss(&output, &targets, batch, cfg)?;
            loss.backward()?;
            if let Some(clip) = cfg.grad_clip {
                let norm = params.grad_norm();
                if norm > clip {
                    let factor = clip / norm;
                    for p in params.iter() {
                        p.scale_grad(factor);
                    }
                }
            }
            adam.step(params, lr)?;
            loss_sum += loss.to_scalar()?;
        }
        let train_loss = loss_sum / batches.len() as f64;
        let (dev_mae, dev_rmse) = evaluate_point(model, &dev, cfg.transform, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_mae,
            dev_rmse,
            lr,
        });

        if dev_mae < best_mae {
            best_mae = dev_mae;
            best_epoch = epoch;
            best_snapshot = params.snapshot();
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    params.restore(&best_snapshot);
    Ok(FitReport {
        history,
        best_epoch,
        best_dev_mae: best_mae,
        stopped_early,
    })
}
