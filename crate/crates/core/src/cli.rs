//! Command-line surface: train, evaluate, calibrate, ablate, sweep,
//! synth. Every command writes its artifacts plus a manifest into a run
//! directory; metric artifacts are byte-reproducible for a fixed config
//! and seed set.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::calibration::{
    binned_calibration_table, calibration_report, coverage, write_records, CoverageConvention,
    PredictionRecord, DEFAULT_ECE_BINS,
};
use crate::data::{generate_synthetic, load_dataset, write_dataset, Batch, Dataset, Session, Split, SynthSpec};
use crate::error::{Error, Result};
use crate::losses::{LossKind, LossWeights};
use crate::model::{ModelConfig, SequenceRegressor};
use crate::report::{
    render_xy_svg, write_binned_csv, write_coverage_csv, write_history_csv, write_json,
    write_scatter_csv, write_temporal_csv, Manifest, MetricSummary, Series,
};
use crate::training::{evaluate_nll, evaluate_point, fit, transform_targets, TrainConfig};

pub const OUT_ROOT_ENV: &str = "PROBSEQ_OUT";

/// Full run configuration, loaded from a JSON document. Every field has
/// a default, so a config file only needs what it overrides.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub convention: CoverageConvention,
    pub synth: Option<SynthSpec>,
    pub eval_batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: None,
            checkpoint: None,
            seeds: vec![0],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            convention: CoverageConvention::default(),
            synth: None,
            eval_batch_size: 32,
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let bytes = std::fs::read(path.as_ref())?;
    let cfg: RunConfig =
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    Ok(cfg)
}

#[derive(Parser)]
#[command(name = "probseq", version, about = "Probabilistic sequence regression with calibrated uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Clone)]
pub struct CommonArgs {
    /// JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed; repeat the flag for multi-seed runs.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory (default: `$PROBSEQ_OUT/<command>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Model checkpoint path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train one model per seed; write checkpoints, history, summary.
    Train(CommonArgs),
    /// Point and NLL metrics of a checkpoint on dev/test splits.
    Evaluate(CommonArgs),
    /// Calibration report and plot files for a checkpoint.
    Calibrate(CommonArgs),
    /// Architecture-ablation table (20 epochs per variant).
    Ablate(CommonArgs),
    /// Loss-weight sensitivity sweep.
    Sweep(CommonArgs),
    /// Generate a synthetic dataset plus truth records.
    Synth(CommonArgs),
}

fn resolve(args: &CommonArgs, command: &str) -> Result<(RunConfig, Vec<u64>, PathBuf)> {
    let mut cfg = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(ckpt) = &args.checkpoint {
        cfg.checkpoint = Some(ckpt.clone());
    }
    let seeds = if args.seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        args.seeds.clone()
    };
    if seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .or_else(|| std::env::var_os(OUT_ROOT_ENV).map(|root| PathBuf::from(root).join(command)))
        .ok_or_else(|| {
            Error::Config(format!("no output directory: pass --out or set ${OUT_ROOT_ENV}"))
        })?;
    std::fs::create_dir_all(&out)?;
    Ok((cfg, seeds, out))
}

pub fn run(cli: Cli) -> Result<()> {
    let start = Instant::now();
    let (name, args) = match &cli.command {
        Command::Train(a) => ("train", a),
        Command::Evaluate(a) => ("evaluate", a),
        Command::Calibrate(a) => ("calibrate", a),
        Command::Ablate(a) => ("ablate", a),
        Command::Sweep(a) => ("sweep", a),
        Command::Synth(a) => ("synth", a),
    };
    let (cfg, seeds, out) = resolve(args, name)?;
    match &cli.command {
        Command::Train(_) => {
            cmd_train(&cfg, &seeds, &out)?;
        }
        Command::Evaluate(_) => {
            cmd_evaluate(&cfg, &out)?;
        }
        Command::Calibrate(_) => {
            cmd_calibrate(&cfg, &out)?;
        }
        Command::Ablate(_) => {
            cmd_ablate(&cfg, &seeds, &out)?;
        }
        Command::Sweep(_) => {
            cmd_sweep(&cfg, &seeds, &out)?;
        }
        Command::Synth(_) => {
            cmd_synth(&cfg, &out)?;
        }
    }
    Manifest {
        command: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds,
        config: cfg,
        wall_time_secs: start.elapsed().as_secs_f64(),
    }
    .write(&out)?;
    Ok(())
}

fn required_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let path = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("config has no dataset path".into()))?;
    load_dataset(path)
}

fn required_checkpoint(cfg: &RunConfig) -> Result<SequenceRegressor> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("no checkpoint given (flag --checkpoint or config)".into()))?;
    SequenceRegressor::load(path)
}

#[derive(Serialize)]
pub struct SplitMetrics {
    pub mae: f64,
    pub rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
}

fn split_metrics(
    model: &SequenceRegressor,
    sessions: &[&Session],
    cfg: &RunConfig,
) -> Result<SplitMetrics> {
    let (mae, rmse) = evaluate_point(model, sessions, cfg.train.transform, cfg.eval_batch_size)?;
    let nll = if model.config().use_variance_head {
        Some(evaluate_nll(model, sessions, cfg.train.transform, cfg.eval_batch_size)?)
    } else {
        None
    };
    Ok(SplitMetrics { mae, rmse, nll })
}

// ---- train -----------------------------------------------------------------

#[derive(Serialize)]
pub struct TrainSummary {
    pub seeds: Vec<u64>,
    pub parameters: usize,
    pub epochs_ran: Vec<usize>,
    pub best_epochs: Vec<usize>,
    pub dev_mae: MetricSummary,
    pub dev_rmse: MetricSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_nll: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_mae: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_rmse: Option<MetricSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_nll: Option<MetricSummary>,
}

pub fn cmd_train(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<TrainSummary> {
    let dataset = required_dataset(cfg)?;
    let mut parameters = 0;
    let mut epochs_ran = Vec::new();
    let mut best_epochs = Vec::new();
    let mut dev_mae = Vec::new();
    let mut dev_rmse = Vec::new();
    let mut dev_nll = Vec::new();
    let mut test_mae = Vec::new();
    let mut test_rmse = Vec::new();
    let mut test_nll = Vec::new();

    for &seed in seeds {
        let model = SequenceRegressor::new(cfg.model.clone(), seed)?;
        parameters = model.count_parameters();
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let report = fit(&model, &dataset, &train_cfg)?;
        let seed_dir = out.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&seed_dir)?;
        model.save(seed_dir.join("checkpoint.bin"))?;
        write_history_csv(seed_dir.join("history.csv"), &report.history)?;
        epochs_ran.push(report.history.len());
        best_epochs.push(report.best_epoch);

        let dev = split_metrics(&model, &dataset.split(Split::Dev), cfg)?;
        dev_mae.push(dev.mae);
        dev_rmse.push(dev.rmse);
        if let Some(n) = dev.nll {
            dev_nll.push(n);
        }
        let test_sessions = dataset.split(Split::Test);
        if !test_sessions.is_empty() {
            let test = split_metrics(&model, &test_sessions, cfg)?;
            test_mae.push(test.mae);
            test_rmse.push(test.rmse);
            if let Some(n) = test.nll {
                test_nll.push(n);
            }
        }
    }

    let opt = |v: Vec<f64>| {
        if v.is_empty() {
            None
        } else {
            Some(MetricSummary::from_values(v))
        }
    };
    let summary = TrainSummary {
        seeds: seeds.to_vec(),
        parameters,
        epochs_ran,
        best_epochs,
        dev_mae: MetricSummary::from_values(dev_mae),
        dev_rmse: MetricSummary::from_values(dev_rmse),
        dev_nll: opt(dev_nll),
        test_mae: opt(test_mae),
        test_rmse: opt(test_rmse),
        test_nll: opt(test_nll),
    };
    write_json(out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---- evaluate --------------------------------------------------------------

#[derive(Serialize)]
pub struct EvalSummary {
    pub parameters: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev: Option<SplitMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<SplitMetrics>,
}

pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<EvalSummary> {
    let dataset = required_dataset(cfg)?;
    let model = required_checkpoint(cfg)?;
    let eval = |split: Split| -> Result<Option<SplitMetrics>> {
        let sessions = dataset.split(split);
        if sessions.is_empty() {
            Ok(None)
        } else {
            Ok(Some(split_metrics(&model, &sessions, cfg)?))
        }
    };
    let summary = EvalSummary {
        parameters: model.count_parameters(),
        dev: eval(Split::Dev)?,
        test: eval(Split::Test)?,
    };
    write_json(out.join("metrics.json"), &summary)?;
    Ok(summary)
}

// ---- calibrate -------------------------------------------------------------

/// Model-space prediction records over every valid output position.
pub fn predict_records(
    model: &SequenceRegressor,
    sessions: &[&Session],
    cfg: &RunConfig,
) -> Result<Vec<PredictionRecord>> {
    let mut records = Vec::new();
    for chunk in sessions.chunks(cfg.eval_batch_size.max(1)) {
        let batch = Batch::from_sessions(chunk)?;
        let out = model.forward(&Tape::new(), &batch)?;
        let sigma = out.sigma.as_ref().ok_or_else(|| {
            Error::UnsupportedMetric("calibration requires a model with a variance head".into())
        })?;
        let targets = transform_targets(&batch.labels, cfg.train.transform)?;
        let steps = out.mask.steps();
        #[allow(clippy::needless_range_loop)]
        for b in 0..out.mask.batch() {
            for t in 0..steps {
                if !out.mask.valid(b, t) {
                    continue;
                }
                let idx = b * steps + t;
                records.push(PredictionRecord {
                    session: batch.ids[b].clone(),
                    t,
                    y: targets[b],
                    mu: out.mu.data()[idx],
                    sigma: sigma.data()[idx],
                    nu: out.nu.as_ref().map(|n| n.data()[idx]),
                });
            }
        }
    }
    Ok(records)
}

pub fn cmd_calibrate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let dataset = required_dataset(cfg)?;
    let model = required_checkpoint(cfg)?;
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("dataset has no test split".into()));
    }
    let records = predict_records(&model, &test, cfg)?;
    write_records(out.join("predictions.csv"), &records)?;

    let report = calibration_report(&records, cfg.convention)?;
    write_json(out.join("report.json"), &report)?;

    // plot data + renderings: binned calibration, scatter, coverage curve
    let bins = binned_calibration_table(&records, DEFAULT_ECE_BINS)?;
    write_binned_csv(out.join("calibration_binned.csv"), &bins)?;
    let bin_points: Vec<(f64, f64)> = bins.iter().map(|b| (b.mean_sigma, b.mean_abs_err)).collect();
    render_xy_svg(
        out.join("calibration_binned.svg"),
        "Binned calibration",
        "mean predicted sigma",
        "mean absolute error",
        &[Series {
            points: &bin_points,
            color: "#1f77b4",
            line: true,
        }],
        true,
    )?;

    write_scatter_csv(out.join("scatter.csv"), &records)?;
    let scatter_points: Vec<(f64, f64)> = records.iter().map(|r| (r.sigma, r.abs_err())).collect();
    render_xy_svg(
        out.join("scatter.svg"),
        "Predicted uncertainty vs observed error",
        "predicted sigma",
        "absolute error",
        &[Series {
            points: &scatter_points,
            color: "#1f77b4",
            line: false,
        }],
        true,
    )?;

    let mut curve = Vec::new();
    for i in 1..20 {
        let level = i as f64 * 0.05;
        curve.push((level, coverage(&records, level, cfg.convention)?));
    }
    write_coverage_csv(out.join("coverage_curve.csv"), &curve)?;
    render_xy_svg(
        out.join("coverage_curve.svg"),
        "Empirical coverage",
        "nominal level",
        "empirical coverage",
        &[Series {
            points: &curve,
            color: "#1f77b4",
            line: true,
        }],
        true,
    )?;

    write_temporal_csv(out.join("temporal.csv"), &report.temporal)?;
    Ok(())
}

// ---- ablate ----------------------------------------------------------------

#[derive(Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub test_mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_mae_pct: Option<f64>,
    pub test_rmse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_rmse_pct: Option<f64>,
}

/// The four architecture variants, trained for 20 epochs each; the
/// variance-head-off variant falls back to MSE training.
pub fn cmd_ablate(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationRow>> {
    let dataset = required_dataset(cfg)?;
    let seed = seeds[0];
    type Tweak = Box<dyn Fn(&mut ModelConfig, &mut TrainConfig)>;
    let variants: [(&str, Tweak); 4] = [
        ("full", Box::new(|_, _| {})),
        ("no_attention", Box::new(|m, _| m.use_attention = false)),
        ("no_residual", Box::new(|m, _| m.use_residual = false)),
        (
            "no_variance_head",
            Box::new(|m, t| {
                m.use_variance_head = false;
                t.loss = LossKind::Mse;
            }),
        ),
    ];
    let test = dataset.split(Split::Test);
    if test.is_empty() {
        return Err(Error::Config("ablation needs a test split".into()));
    }

    let mut rows: Vec<AblationRow> = Vec::new();
    let mut full_metrics = (0.0, 0.0);
    for (name, tweak) in &variants {
        let mut model_cfg = cfg.model.clone();
        let mut train_cfg = TrainConfig {
            seed,
            epochs: 20,
            ..cfg.train.clone()
        };
        tweak(&mut model_cfg, &mut train_cfg);
        let model = SequenceRegressor::new(model_cfg, seed)?;
        fit(&model, &dataset, &train_cfg)?;
        let (mae, rmse) = evaluate_point(&model, &test, train_cfg.transform, cfg.eval_batch_size)?;
        if *name == "full" {
            full_metrics = (mae, rmse);
        }
        let delta = |v: f64, full: f64| {
            if *name == "full" {
                None
            } else {
                Some(100.0 * (v - full) / full)
            }
        };
        rows.push(AblationRow {
            variant: name.to_string(),
            parameters: model.count_parameters(),
            test_mae: mae,
            delta_mae_pct: delta(mae, full_metrics.0),
            test_rmse: rmse,
            delta_rmse_pct: delta(rmse, full_metrics.1),
        });
    }
    write_json(out.join("ablation.json"), &rows)?;
    let mut csv = String::from("variant,parameters,test_mae,delta_mae_pct,test_rmse,delta_rmse_pct\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant,
            r.parameters,
            r.test_mae,
            r.delta_mae_pct.map(|v| v.to_string()).unwrap_or_default(),
            r.test_rmse,
            r.delta_rmse_pct.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(out.join("ablation.csv"), csv)?;
    Ok(rows)
}

// ---- sweep -----------------------------------------------------------------

#[derive(Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub label: String,
    pub dev_nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_nll: Option<f64>,
}

/// Loss-weight settings of the sensitivity analysis, with their labels.
pub const SWEEP_SETTINGS: [(f64, f64, f64, &str); 4] = [
    (1.0, 1.0, 1.0, "standard NLL"),
    (1.0, 2.0, 1.0, "uncertainty-averse"),
    (1.0, 1.0, 2.0, "error-focused"),
    (1.0, 1.0, 0.5, "calibration-first"),
];

pub fn cmd_sweep(cfg: &RunConfig, seeds: &[u64], out: &Path) -> Result<Vec<SweepRow>> {
    let dataset = required_dataset(cfg)?;
    if !cfg.model.use_variance_head {
        return Err(Error::Config("the sweep needs a variance head".into()));
    }
    let seed = seeds[0];
    let mut rows = Vec::new();
    for (alpha, beta, gamma, label) in SWEEP_SETTINGS {
        let train_cfg = TrainConfig {
            seed,
            loss: LossKind::GaussianNll,
            weights: LossWeights::new(alpha, beta, gamma),
            ..cfg.train.clone()
        };
        let model = SequenceRegressor::new(cfg.model.clone(), seed)?;
        fit(&model, &dataset, &train_cfg)?;
        let dev_nll = evaluate_nll(
            &model,
            &dataset.split(Split::Dev),
            train_cfg.transform,
            cfg.eval_batch_size,
        )?;
        let test_sessions = dataset.split(Split::Test);
        let test_nll = if test_sessions.is_empty() {
            None
        } else {
            Some(evaluate_nll(
                &model,
                &test_sessions,
                train_cfg.transform,
                cfg.eval_batch_size,
            )?)
        };
        rows.push(SweepRow {
            alpha,
            beta,
            gamma,
            label: label.to_string(),
            dev_nll,
            test_nll,
        });
    }
    write_json(out.join("sweep.json"), &rows)?;
    let mut csv = String::from("alpha,beta,gamma,label,dev_nll,test_nll\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.alpha,
            r.beta,
            r.gamma,
            r.label,
            r.dev_nll,
            r.test_nll.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(out.join("sweep.csv"), csv)?;
    Ok(rows)
}

// ---- synth -----------------------------------------------------------------

#[derive(Serialize)]
pub struct SynthSummary {
    pub sessions: usize,
    pub dim: usize,
    pub dataset_path: PathBuf,
    pub truth_path: PathBuf,
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<SynthSummary> {
    let spec = cfg
        .synth
        .as_ref()
        .ok_or_else(|| Error::Config("config has no synth spec".into()))?;
    let (dataset, truths) = generate_synthetic(spec)?;
    let dataset_path = out.join("dataset.jsonl");
    let truth_path = out.join("truth.json");
    write_dataset(&dataset_path, &dataset)?;
    write_json(&truth_path, &truths)?;
    let summary = SynthSummary {
        sessions: dataset.len(),
        dim: dataset.dim,
        dataset_path,
        truth_path,
    };
    write_json(out.join("synth.json"), &summary)?;
    Ok(summary)
}
