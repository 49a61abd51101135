//! C ABI over the probseq engine.
//!
//! Conventions: every fallible function returns a [`PsStatus`] and
//! writes its result through an out-pointer. On any non-zero status the
//! thread-local message from [`ps_last_error_message`] describes the
//! failure. Handles (`PsDataset`, `PsModel`, `PsPredictions`) are
//! opaque; free them with their matching `_free` function exactly once.
//! Strings returned through `char**` out-parameters are owned by the
//! caller and must be released with [`ps_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use probseq::calibration::{calibration_report, CoverageConvention, PredictionRecord};
use probseq::cli::{predict_records, RunConfig};
use probseq::data::{
    generate_synthetic, load_dataset, toy_embed, write_dataset, Dataset, Split, SynthSpec,
};
use probseq::model::{ModelConfig, SequenceRegressor};
use probseq::training::{fit, TrainConfig, TransformKind};
use probseq::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PsStatus {
    Ok = 0,
    /// Null pointer, malformed UTF-8, index out of range.
    InvalidArgument = 1,
    /// Invalid configuration or contract violation.
    ConfigError = 2,
    /// NaN or infinity encountered during computation.
    NumericFault = 3,
    /// File system or parse failure.
    IoError = 4,
    /// Internal panic; file a bug.
    Internal = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<Vec<u8>>) {
    let message = CString::new(message).unwrap_or_else(|_| CString::new("invalid error").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(message));
}

fn status_of(err: &Error) -> PsStatus {
    match err.exit_code() {
        3 => PsStatus::NumericFault,
        4 => PsStatus::IoError,
        _ => PsStatus::ConfigError,
    }
}

fn fail(err: Error) -> PsStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn invalid(message: &str) -> PsStatus {
    set_error(message);
    PsStatus::InvalidArgument
}

/// Run a body with a panic guard; panics become `Internal`.
fn guarded(body: impl FnOnce() -> PsStatus) -> PsStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            PsStatus::Internal
        }
    }
}

unsafe fn required_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, PsStatus> {
    if ptr.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

/// Message of the most recent failure on this thread, or null.
/// The pointer stays valid until the next failing call on the thread.
#[no_mangle]
pub extern "C" fn ps_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map(|msg| msg.as_ptr())
            .unwrap_or(std::ptr::null())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ps_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Release a string returned through a `char**` out-parameter.
///
/// # Safety
/// `s` must have been produced by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn ps_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- datasets ------------------------------------------------------------

/// Opaque collection of sessions.
pub struct PsDataset {
    inner: Dataset,
}

/// Load a JSON-lines dataset from a file.
///
/// # Safety
/// `path` must be a valid NUL-terminated string; `out` must be a valid
/// pointer to receive the handle.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_load(
    path: *const c_char,
    out: *mut *mut PsDataset,
) -> PsStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_dataset(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PsDataset { inner }));
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Generate a synthetic dataset from a JSON spec. When `truth_json` is
/// non-null it receives the generator's truth records as a JSON string.
///
/// # Safety
/// `spec_json` must be a valid NUL-terminated string; `out` must be
/// valid; `truth_json` may be null.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_generate(
    spec_json: *const c_char,
    out: *mut *mut PsDataset,
    truth_json: *mut *mut c_char,
) -> PsStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let spec = match required_str(spec_json, "spec_json") {
            Ok(s) => s,
            Err(s) => return s,
        };
        let spec: SynthSpec = match serde_json::from_str(spec) {
            Ok(s) => s,
            Err(e) => return fail(Error::Config(format!("bad synth spec: {e}"))),
        };
        match generate_synthetic(&spec) {
            Ok((dataset, truths)) => {
                if !truth_json.is_null() {
                    let rendered = serde_json::to_string(&truths).unwrap_or_default();
                    *truth_json = CString::new(rendered).unwrap().into_raw();
                }
                *out = Box::into_raw(Box::new(PsDataset { inner: dataset }));
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Write a dataset back out in the JSON-lines format.
///
/// # Safety
/// `dataset` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_write(
    dataset: *const PsDataset,
    path: *const c_char,
) -> PsStatus {
    guarded(|| {
        let Some(ds) = dataset.as_ref() else {
            return invalid("dataset is null");
        };
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match write_dataset(path, &ds.inner) {
            Ok(()) => PsStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Number of sessions; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_len(dataset: *const PsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.len())
}

/// # Safety
/// `dataset` must be null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_free(dataset: *mut PsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Embedding width; 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_dataset_dim(dataset: *const PsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.dim)
}

// ---- models ----------------------------------------------------------------

/// Opaque trained model.
pub struct PsModel {
    inner: SequenceRegressor,
}

/// Load a model checkpoint.
///
/// # Safety
/// `path` must be a valid string; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_load(path: *const c_char, out: *mut *mut PsModel) -> PsStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match SequenceRegressor::load(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PsModel { inner }));
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Save a model checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a valid string.
#[no_mangle]
pub unsafe extern "C" fn ps_model_save(model: *const PsModel, path: *const c_char) -> PsStatus {
    guarded(|| {
        let Some(m) = model.as_ref() else {
            return invalid("model is null");
        };
        let path = match required_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match m.inner.save(path) {
            Ok(()) => PsStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

/// Train a fresh model on the dataset's train/dev splits. The configs
/// are JSON documents matching the CLI schema; empty strings select the
/// defaults.
///
/// # Safety
/// `dataset` must be a live handle; config strings valid or null;
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_model_train(
    dataset: *const PsDataset,
    model_config_json: *const c_char,
    train_config_json: *const c_char,
    seed: u64,
    out: *mut *mut PsModel,
) -> PsStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let Some(ds) = dataset.as_ref() else {
            return invalid("dataset is null");
        };
        let parse_json = |ptr: *const c_char, what: &str| -> Result<Option<String>, PsStatus> {
            if ptr.is_null() {
                return Ok(None);
            }
            let s = required_str(ptr, what)?;
            Ok(if s.trim().is_empty() { None } else { Some(s.to_string()) })
        };
        let model_cfg: ModelConfig = match parse_json(model_config_json, "model_config_json") {
            Ok(Some(s)) => match serde_json::from_str(&s) {
                Ok(c) => c,
                Err(e) => return fail(Error::Config(format!("bad model config: {e}"))),
            },
            Ok(None) => ModelConfig::default(),
            Err(status) => return status,
        };
        let train_cfg: TrainConfig = match parse_json(train_config_json, "train_config_json") {
            Ok(Some(s)) => match serde_json::from_str(&s) {
                Ok(c) => c,
                Err(e) => return fail(Error::Config(format!("bad train config: {e}"))),
            },
            Ok(None) => TrainConfig::default(),
            Err(status) => return status,
        };
        let train_cfg = TrainConfig { seed, ..train_cfg };
        let model = match SequenceRegressor::new(model_cfg, seed) {
            Ok(m) => m,
            Err(e) => return fail(e),
        };
        match fit(&model, &ds.inner, &train_cfg) {
            Ok(_) => {
                *out = Box::into_raw(Box::new(PsModel { inner: model }));
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Total number of trainable parameters; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_model_parameter_count(model: *const PsModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.count_parameters())
}

/// # Safety
/// `model` must be null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ps_model_free(model: *mut PsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

// ---- predictions -------------------------------------------------------------

/// Opaque prediction set.
pub struct PsPredictions {
    records: Vec<PredictionRecord>,
    sessions: Vec<CString>,
}

/// One prediction row. `nu` is meaningful only when `has_nu` is true.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct PsPredictionRow {
    pub t: usize,
    pub y: f64,
    pub mu: f64,
    pub sigma: f64,
    pub nu: f64,
    pub has_nu: bool,
}

/// Run inference over one split ("train", "dev" or "test") and collect
/// per-position prediction records. `transform` is "log1p" or
/// "identity" and must match how the model was trained.
///
/// # Safety
/// `model` and `dataset` must be live handles; strings valid; `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_predict(
    model: *const PsModel,
    dataset: *const PsDataset,
    split: *const c_char,
    transform: *const c_char,
    out: *mut *mut PsPredictions,
) -> PsStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let (Some(m), Some(ds)) = (model.as_ref(), dataset.as_ref()) else {
            return invalid("model or dataset is null");
        };
        let split = match required_str(split, "split") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let split = match Split::parse(split) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        let transform = match required_str(transform, "transform") {
            Ok("log1p") => TransformKind::Log1p,
            Ok("identity") => TransformKind::Identity,
            Ok(other) => return fail(Error::Config(format!("unknown transform {other:?}"))),
            Err(status) => return status,
        };
        let sessions = ds.inner.split(split);
        if sessions.is_empty() {
            return fail(Error::Config(format!("dataset has no {} split", split.as_str())));
        }
        let run_cfg = RunConfig {
            train: TrainConfig {
                transform,
                ..TrainConfig::default()
            },
            ..RunConfig::default()
        };
        match predict_records(&m.inner, &sessions, &run_cfg) {
            Ok(records) => {
                let sessions = records
                    .iter()
                    .map(|r| CString::new(r.session.as_str()).unwrap_or_default())
                    .collect();
                *out = Box::into_raw(Box::new(PsPredictions { records, sessions }));
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Number of records; 0 for a null handle.
///
/// # Safety
/// `predictions` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_predictions_len(predictions: *const PsPredictions) -> usize {
    predictions.as_ref().map_or(0, |p| p.records.len())
}

/// Copy record `index` into `row`.
///
/// # Safety
/// `predictions` must be a live handle; `row` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_predictions_row(
    predictions: *const PsPredictions,
    index: usize,
    row: *mut PsPredictionRow,
) -> PsStatus {
    guarded(|| {
        let Some(p) = predictions.as_ref() else {
            return invalid("predictions is null");
        };
        if row.is_null() {
            return invalid("row is null");
        }
        let Some(r) = p.records.get(index) else {
            return invalid("index out of range");
        };
        *row = PsPredictionRow {
            t: r.t,
            y: r.y,
            mu: r.mu,
            sigma: r.sigma,
            nu: r.nu.unwrap_or(0.0),
            has_nu: r.nu.is_some(),
        };
        PsStatus::Ok
    })
}

/// Session id of record `index`; borrowed, valid while the handle
/// lives. Null when out of range.
///
/// # Safety
/// `predictions` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ps_predictions_session(
    predictions: *const PsPredictions,
    index: usize,
) -> *const c_char {
    predictions
        .as_ref()
        .and_then(|p| p.sessions.get(index))
        .map(|s| s.as_ptr())
        .unwrap_or(std::ptr::null())
}

/// # Safety
/// `predictions` must be null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ps_predictions_free(predictions: *mut PsPredictions) {
    if !predictions.is_null() {
        drop(Box::from_raw(predictions));
    }
}

/// Full calibration report over the records, as a JSON string. Set
/// `one_sigma_at_68` for the plus-minus-one-sigma reading of the 68%
/// level instead of the exact central quantile.
///
/// # Safety
/// `predictions` must be a live handle; `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ps_calibration_report_json(
    predictions: *const PsPredictions,
    one_sigma_at_68: bool,
    out_json: *mut *mut c_char,
) -> PsStatus {
    guarded(|| {
        let Some(p) = predictions.as_ref() else {
            return invalid("predictions is null");
        };
        if out_json.is_null() {
            return invalid("out_json is null");
        }
        let convention = if one_sigma_at_68 {
            CoverageConvention::OneSigmaAt68
        } else {
            CoverageConvention::ExactQuantile
        };
        match calibration_report(&p.records, convention) {
            Ok(report) => {
                let rendered = match serde_json::to_string_pretty(&report) {
                    Ok(r) => r,
                    Err(e) => return fail(Error::Json(e)),
                };
                *out_json = CString::new(rendered).unwrap_or_default().into_raw();
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

// ---- embedding ----------------------------------------------------------------

/// Deterministic bag-of-words embedding of `text` into `dim` buckets,
/// written to `out` (which must hold `dim` doubles).
///
/// # Safety
/// `text` must be a valid string; `out` must point to `dim` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn ps_toy_embed(text: *const c_char, dim: usize, out: *mut f64) -> PsStatus {
    guarded(|| {
        if out.is_null() {
            return invalid("out is null");
        }
        let text = match required_str(text, "text") {
            Ok(t) => t,
            Err(status) => return status,
        };
        match toy_embed(text, dim) {
            Ok(vec) => {
                std::ptr::copy_nonoverlapping(vec.as_ptr(), out, dim);
                PsStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}
