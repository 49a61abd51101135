//! End-to-end contracts of the command surface: artifact layouts,
//! table schemas, reruns, and process exit codes.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use probseq::cli::{cmd_ablate, cmd_calibrate, cmd_sweep, cmd_synth, cmd_train, RunConfig};
use probseq::data::{load_dataset, write_dataset, LatentRule, NoiseModel, SynthSpec};
use probseq::losses::LossKind;
use probseq::model::{Family, Mode, ModelConfig};
use probseq::training::{TrainConfig, TransformKind};

use common::hetero_spec;

fn workdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("probseq-pipeline-{}-{tag}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_run_config(dir: &Path, epochs: usize) -> RunConfig {
    let (dataset, _) = probseq::data::generate_synthetic(&hetero_spec(36, 10, 9)).unwrap();
    let data_path = dir.join("dataset.jsonl");
    write_dataset(&data_path, &dataset).unwrap();
    RunConfig {
        dataset: Some(data_path),
        model: ModelConfig {
            mode: Mode::Seq2Seq,
            family: Family::Gaussian,
            input_dim: 10,
            hidden_dim: 6,
            num_layers: 1,
            num_heads: 2,
            head_hidden: vec![6],
            ..ModelConfig::default()
        },
        train: TrainConfig {
            epochs,
            patience: epochs,
            batch_size: 8,
            lr_max: 5e-3,
            lr_min: 1e-3,
            loss: LossKind::GaussianNll,
            transform: TransformKind::Log1p,
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn train_emits_checkpoints_history_and_multi_seed_summary() {
    let dir = workdir("train");
    let cfg = small_run_config(&dir, 3);
    let out = dir.join("run");
    std::fs::create_dir_all(&out).unwrap();
    let summary = cmd_train(&cfg, &[0, 1, 2], &out).unwrap();

    for seed in [0, 1, 2] {
        assert!(out.join(format!("seed_{seed}/checkpoint.bin")).is_file());
        assert!(out.join(format!("seed_{seed}/history.csv")).is_file());
    }
    assert!(out.join("summary.json").is_file());
    assert_eq!(summary.dev_mae.values.len(), 3);
    assert!(summary.dev_mae.sd >= 0.0);
    let test_mae = summary.test_mae.expect("test split present");
    assert_eq!(test_mae.values.len(), 3);
    // mean is the mean of the per-seed values
    let mean: f64 = test_mae.values.iter().sum::<f64>() / 3.0;
    assert!((test_mae.mean - mean).abs() < 1e-15);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn calibrate_emits_exactly_the_contracted_artifacts_and_reruns_identically() {
    let dir = workdir("calibrate");
    let mut cfg = small_run_config(&dir, 3);
    let train_out = dir.join("train");
    std::fs::create_dir_all(&train_out).unwrap();
    cmd_train(&cfg, &[0], &train_out).unwrap();
    cfg.checkpoint = Some(train_out.join("seed_0/checkpoint.bin"));

    let artifacts = [
        "predictions.csv",
        "report.json",
        "calibration_binned.csv",
        "scatter.csv",
        "coverage_curve.csv",
        "calibration_binned.svg",
        "scatter.svg",
        "coverage_curve.svg",
    ];
    let out1 = dir.join("cal1");
    let out2 = dir.join("cal2");
    std::fs::create_dir_all(&out1).unwrap();
    std::fs::create_dir_all(&out2).unwrap();
    cmd_calibrate(&cfg, &out1).unwrap();
    cmd_calibrate(&cfg, &out2).unwrap();
    for name in artifacts {
        assert!(out1.join(name).is_file(), "missing artifact {name}");
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs across reruns");
    }

    // every rate in the report is a probability
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out1.join("report.json")).unwrap()).unwrap();
    for row in report["coverage"].as_array().unwrap() {
        let rate = row["rate"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }
    assert!(report["ece_binned"].as_f64().unwrap() >= 0.0);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablation_table_schema_and_parameter_ordering() {
    let dir = workdir("ablate");
    let cfg = small_run_config(&dir, 2);
    let out = dir.join("run");
    std::fs::create_dir_all(&out).unwrap();
    let rows = cmd_ablate(&cfg, &[0], &out).unwrap();

    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(names, ["full", "no_attention", "no_residual", "no_variance_head"]);
    let full = &rows[0];
    assert!(full.delta_mae_pct.is_none() && full.delta_rmse_pct.is_none());
    for row in &rows[1..] {
        let expect = 100.0 * (row.test_mae - full.test_mae) / full.test_mae;
        assert!((row.delta_mae_pct.unwrap() - expect).abs() < 1e-12);
    }
    // attention and variance-head removal shed parameters; the residual
    // connection has none to shed
    assert!(rows[1].parameters < full.parameters);
    assert!(rows[3].parameters < full.parameters);
    assert_eq!(rows[2].parameters, full.parameters);
    assert!(out.join("ablation.csv").is_file());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn sweep_rows_carry_the_documented_labels() {
    let dir = workdir("sweep");
    let mut cfg = small_run_config(&dir, 2);
    cfg.train.epochs = 2;
    cfg.train.patience = 2;
    let out = dir.join("run");
    std::fs::create_dir_all(&out).unwrap();
    let rows = cmd_sweep(&cfg, &[0], &out).unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        ["standard NLL", "uncertainty-averse", "error-focused", "calibration-first"]
    );
    assert_eq!(
        rows.iter().map(|r| (r.alpha, r.beta, r.gamma)).collect::<Vec<_>>(),
        vec![(1.0, 1.0, 1.0), (1.0, 2.0, 1.0), (1.0, 1.0, 2.0), (1.0, 1.0, 0.5)]
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn synth_output_reloads_to_the_same_dataset() {
    let dir = workdir("synth");
    let spec = SynthSpec {
        num_sessions: 17,
        t_min: 2,
        t_max: 6,
        dim: 9,
        latent: LatentRule::Linear,
        noise: NoiseModel::Homoscedastic { sigma0: 0.2 },
        seed: 77,
        split_weights: (0.6, 0.2, 0.2),
    };
    let cfg = RunConfig {
        synth: Some(spec.clone()),
        ..RunConfig::default()
    };
    let out = dir.join("run");
    std::fs::create_dir_all(&out).unwrap();
    let summary = cmd_synth(&cfg, &out).unwrap();
    assert_eq!(summary.sessions, 17);
    assert!(out.join("truth.json").is_file());

    let reloaded = load_dataset(out.join("dataset.jsonl")).unwrap();
    let (direct, _) = probseq::data::generate_synthetic(&spec).unwrap();
    assert_eq!(reloaded.len(), direct.len());
    for (a, b) in reloaded.sessions.iter().zip(&direct.sessions) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.label.to_bits(), b.label.to_bits());
        assert!(a
            .embeddings
            .iter()
            .zip(&b.embeddings)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    std::fs::remove_dir_all(&dir).ok();
}

// ---- process-level exit codes -------------------------------------------------

fn run_binary(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_probseq"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn out_root_env_var_provides_the_default_output_dir() {
    let dir = workdir("envroot");
    std::fs::write(
        dir.join("synth.json"),
        r#"{"synth": {"num_sessions": 2, "t_min": 1, "t_max": 2, "dim": 8,
            "latent": {"rule": "linear"}, "noise": {"kind": "homoscedastic", "sigma0": 0.1},
            "seed": 3}}"#,
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_probseq"))
        .args(["synth", "--config", dir.join("synth.json").to_str().unwrap()])
        .env("PROBSEQ_OUT", &dir)
        .output()
        .expect("binary runs");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.join("synth/dataset.jsonl").is_file());
    assert!(dir.join("synth/manifest.json").is_file());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = workdir("exitcodes");

    // config error: config file does not exist
    let out = run_binary(&[
        "train",
        "--config",
        "/definitely/not/here.json",
        "--out",
        dir.join("a").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "missing config file is an I/O error");

    // config error: no dataset in config
    std::fs::write(dir.join("empty.json"), "{}").unwrap();
    let out = run_binary(&[
        "train",
        "--config",
        dir.join("empty.json").to_str().unwrap(),
        "--out",
        dir.join("b").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "dataset-less train is a config error");

    // parse error in the dataset: exit 4
    std::fs::write(dir.join("bad.jsonl"), "not json\n").unwrap();
    std::fs::write(
        dir.join("badcfg.json"),
        format!("{{\"dataset\": {:?}}}", dir.join("bad.jsonl")),
    )
    .unwrap();
    let out = run_binary(&[
        "train",
        "--config",
        dir.join("badcfg.json").to_str().unwrap(),
        "--out",
        dir.join("c").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4), "malformed dataset is a parse error");

    // clap usage error: unknown subcommand
    let out = run_binary(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    // success path: synth
    std::fs::write(
        dir.join("synth.json"),
        r#"{"synth": {"num_sessions": 3, "t_min": 1, "t_max": 3, "dim": 8,
            "latent": {"rule": "linear"}, "noise": {"kind": "homoscedastic", "sigma0": 0.1},
            "seed": 1}}"#,
    )
    .unwrap();
    let out = run_binary(&[
        "synth",
        "--config",
        dir.join("synth.json").to_str().unwrap(),
        "--out",
        dir.join("d").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // every command run through the CLI leaves a replay manifest
    assert!(dir.join("d/manifest.json").is_file());
    std::fs::remove_dir_all(&dir).ok();
}
