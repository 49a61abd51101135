//! Drive the C surface end to end from Rust: generate data, train,
//! predict, report, and exercise the error paths.

use std::ffi::{CStr, CString};

use probseq_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn last_error() -> String {
    let ptr = ps_last_error_message();
    assert!(!ptr.is_null(), "expected an error message");
    CStr::from_ptr(ptr).to_string_lossy().into_owned()
}

#[test]
fn full_flow_through_the_c_surface() {
    unsafe {
        let spec = cstr(
            r#"{"num_sessions": 30, "t_min": 2, "t_max": 6, "dim": 10,
                "latent": {"rule": "linear"},
                "noise": {"kind": "heteroscedastic", "sigma0": 0.1, "factor_min": 0.5, "factor_max": 2.0},
                "seed": 5, "split_weights": [0.6, 0.2, 0.2]}"#,
        );
        let mut dataset: *mut PsDataset = std::ptr::null_mut();
        let mut truth: *mut std::ffi::c_char = std::ptr::null_mut();
        let status = ps_dataset_generate(spec.as_ptr(), &mut dataset, &mut truth);
        assert_eq!(status, PsStatus::Ok);
        assert_eq!(ps_dataset_len(dataset), 30);
        assert_eq!(ps_dataset_dim(dataset), 10);
        assert!(!truth.is_null());
        let truth_str = CStr::from_ptr(truth).to_str().unwrap();
        assert!(truth_str.contains("ideal_sigma"));
        ps_string_free(truth);

        // round-trip the dataset through a file
        let dir = std::env::temp_dir().join(format!("probseq-ffi-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data_path = cstr(dir.join("data.jsonl").to_str().unwrap());
        assert_eq!(ps_dataset_write(dataset, data_path.as_ptr()), PsStatus::Ok);
        let mut reloaded: *mut PsDataset = std::ptr::null_mut();
        assert_eq!(ps_dataset_load(data_path.as_ptr(), &mut reloaded), PsStatus::Ok);
        assert_eq!(ps_dataset_len(reloaded), 30);
        ps_dataset_free(reloaded);

        // train a tiny model
        let model_cfg = cstr(
            r#"{"mode": "seq2seq", "family": "gaussian", "input_dim": 10,
                "hidden_dim": 4, "num_layers": 1, "num_heads": 2, "head_hidden": [4],
                "activation": "relu", "use_attention": true, "use_residual": true,
                "use_variance_head": true, "epsilon": 1e-6, "nu_floor": 2.0, "dropout": 0.0}"#,
        );
        let train_cfg = cstr(
            r#"{"epochs": 3, "lr_max": 0.005, "lr_min": 0.001, "patience": 3,
                "batch_size": 8, "seed": 0, "loss": "gaussian_nll",
                "weights": {"alpha": 1.0, "beta": 1.0, "gamma": 1.0},
                "transform": "log1p", "grad_clip": 5.0}"#,
        );
        let mut model: *mut PsModel = std::ptr::null_mut();
        let status = ps_model_train(dataset, model_cfg.as_ptr(), train_cfg.as_ptr(), 0, &mut model);
        assert_eq!(status, PsStatus::Ok, "{}", last_error());
        assert!(ps_model_parameter_count(model) > 0);

        // checkpoint round trip
        let ckpt_path = cstr(dir.join("model.ckpt").to_str().unwrap());
        assert_eq!(ps_model_save(model, ckpt_path.as_ptr()), PsStatus::Ok);
        let mut loaded: *mut PsModel = std::ptr::null_mut();
        assert_eq!(ps_model_load(ckpt_path.as_ptr(), &mut loaded), PsStatus::Ok);
        assert_eq!(
            ps_model_parameter_count(loaded),
            ps_model_parameter_count(model)
        );

        // predictions + calibration report
        let split = cstr("test");
        let transform = cstr("log1p");
        let mut preds: *mut PsPredictions = std::ptr::null_mut();
        let status = ps_predict(loaded, dataset, split.as_ptr(), transform.as_ptr(), &mut preds);
        assert_eq!(status, PsStatus::Ok, "{}", last_error());
        let n = ps_predictions_len(preds);
        assert!(n > 0);
        let mut row = PsPredictionRow {
            t: 0,
            y: 0.0,
            mu: 0.0,
            sigma: 0.0,
            nu: 0.0,
            has_nu: false,
        };
        assert_eq!(ps_predictions_row(preds, 0, &mut row), PsStatus::Ok);
        assert!(row.sigma > 0.0);
        assert!(!row.has_nu);
        let session = ps_predictions_session(preds, 0);
        assert!(!session.is_null());
        assert!(CStr::from_ptr(session).to_str().unwrap().starts_with('s'));
        assert_eq!(
            ps_predictions_row(preds, n, &mut row),
            PsStatus::InvalidArgument
        );

        let mut report: *mut std::ffi::c_char = std::ptr::null_mut();
        assert_eq!(
            ps_calibration_report_json(preds, false, &mut report),
            PsStatus::Ok
        );
        let report_str = CStr::from_ptr(report).to_str().unwrap();
        assert!(report_str.contains("ece_coverage"));
        ps_string_free(report);

        ps_predictions_free(preds);
        ps_model_free(loaded);
        ps_model_free(model);
        ps_dataset_free(dataset);
        std::fs::remove_dir_all(&dir).ok();
    }
}

#[test]
fn error_paths_set_messages_and_statuses() {
    unsafe {
        let mut dataset: *mut PsDataset = std::ptr::null_mut();
        // null path
        assert_eq!(
            ps_dataset_load(std::ptr::null(), &mut dataset),
            PsStatus::InvalidArgument
        );
        assert!(last_error().contains("null"));

        // missing file
        let path = cstr("/no/such/file.jsonl");
        assert_eq!(
            ps_dataset_load(path.as_ptr(), &mut dataset),
            PsStatus::IoError
        );

        // malformed spec
        let bad_spec = cstr("{\"num_sessions\": \"many\"}");
        let status = ps_dataset_generate(bad_spec.as_ptr(), &mut dataset, std::ptr::null_mut());
        assert_eq!(status, PsStatus::ConfigError);
        assert!(last_error().contains("synth spec"));

        // toy embed: dim too small, then a working call
        let text = cstr("alpha beta gamma");
        let mut buf = vec![0.0f64; 16];
        assert_eq!(
            ps_toy_embed(text.as_ptr(), 4, buf.as_mut_ptr()),
            PsStatus::ConfigError
        );
        assert_eq!(
            ps_toy_embed(text.as_ptr(), 16, buf.as_mut_ptr()),
            PsStatus::Ok
        );
        let norm: f64 = buf.iter().map(|v| v * v).sum();
        assert!((norm - 1.0).abs() < 1e-12);

        // version is a readable static string
        let version = CStr::from_ptr(ps_version()).to_str().unwrap();
        assert!(!version.is_empty());
    }
}
