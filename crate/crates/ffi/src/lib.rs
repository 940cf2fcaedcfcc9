//! C interface to `pdl-core`.
//!
//! Datasets and trained models are opaque heap handles released with their
//! `*_free` function. Every fallible call returns a `PDL_*` status code; on
//! failure `pdl_last_error` describes the problem until the next call on the
//! same thread. Configuration is passed as `key = value` text, or NULL for
//! defaults.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pdl_core::checkpoint::{Checkpoint, CheckpointError};
use pdl_core::config::{ConfigError, RunConfig};
use pdl_core::data::{generate, split_leave_one_domain_out, DataError, Dataset};
use pdl_core::eval::{self, EvalError};
use pdl_core::model::{ModelError, Networks};
use pdl_core::train::{self, TrainError};

pub const PDL_OK: i32 = 0;
/// A required pointer argument was NULL.
pub const PDL_ERR_NULL: i32 = 1;
/// Bad configuration, arguments or file contents.
pub const PDL_ERR_INVALID: i32 = 2;
pub const PDL_ERR_IO: i32 = 3;
/// Training produced a non-finite loss or gradient.
pub const PDL_ERR_NUMERICAL: i32 = 4;
/// Checkpoint architecture or dataset shape does not match the configuration.
pub const PDL_ERR_MISMATCH: i32 = 5;
/// Output buffer too small; the required length was written.
pub const PDL_ERR_BUFFER: i32 = 6;
pub const PDL_ERR_PANIC: i32 = 7;

/// A generated or loaded dataset.
pub struct PdlDataset {
    inner: Dataset,
}

/// Trained parameters with the configuration they were trained under.
pub struct PdlModel {
    checkpoint: Checkpoint,
    nets: Networks,
}

struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Self::new(PDL_ERR_INVALID, e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let code = match e {
            DataError::Io { .. } => PDL_ERR_IO,
            _ => PDL_ERR_INVALID,
        };
        Self::new(code, e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        let code = match e {
            CheckpointError::Io { .. } => PDL_ERR_IO,
            CheckpointError::ArchitectureMismatch { .. } => PDL_ERR_MISMATCH,
            _ => PDL_ERR_INVALID,
        };
        Self::new(code, e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::NonFinite { .. } => Self::new(PDL_ERR_NUMERICAL, e.to_string()),
            TrainError::Mismatch(_) => Self::new(PDL_ERR_MISMATCH, e.to_string()),
            TrainError::Io { .. } => Self::new(PDL_ERR_IO, e.to_string()),
            _ => Self::new(PDL_ERR_INVALID, e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Self::new(PDL_ERR_INVALID, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Self::new(PDL_ERR_INVALID, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(text));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PDL_OK,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| payload.downcast_ref::<&str>().copied())
                .unwrap_or("unknown panic");
            set_last_error(&format!("internal panic: {msg}"));
            PDL_ERR_PANIC
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either NULL or a pointer obtained from this library.
    unsafe { p.as_ref() }.ok_or_else(|| Failure::new(PDL_ERR_NULL, format!("{what} is NULL")))
}

fn text_arg(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure::new(PDL_ERR_NULL, format!("{what} is NULL")));
    }
    // SAFETY: non-null and documented as NUL-terminated.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| Failure::new(PDL_ERR_INVALID, format!("{what} is not valid UTF-8")))
}

fn config_arg(p: *const c_char) -> Result<RunConfig, Failure> {
    let cfg = if p.is_null() {
        RunConfig::default()
    } else {
        RunConfig::parse(&text_arg(p, "config")?)?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::new(PDL_ERR_NULL, "output pointer is NULL"));
    }
    // SAFETY: `out` is non-null and points to writable storage for one pointer.
    unsafe { *out = Box::into_raw(Box::new(value)) };
    Ok(())
}

fn model_from_checkpoint(checkpoint: Checkpoint) -> Result<PdlModel, Failure> {
    let cfg = RunConfig::parse(&checkpoint.manifest.config)?;
    let arch = cfg.architecture();
    checkpoint.check_architecture(&arch)?;
    Ok(PdlModel {
        nets: Networks::new(&arch)?,
        checkpoint,
    })
}

/// Message for the most recent failure on this thread, or NULL. Valid until
/// the next `pdl_*` call on the same thread.
#[no_mangle]
pub extern "C" fn pdl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pdl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Renders the synthetic dataset described by `config`.
///
/// # Safety
/// `config` is NULL or a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_dataset_generate(config: *const c_char, out: *mut *mut PdlDataset) -> i32 {
    guard(|| {
        let cfg = config_arg(config)?;
        let inner = generate(&cfg.generator(), cfg.threads)?;
        write_out(out, PdlDataset { inner })
    })
}

/// Loads a dataset directory written by `pdl generate` or `pdl_dataset_save`.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_dataset_load(path: *const c_char, out: *mut *mut PdlDataset) -> i32 {
    guard(|| {
        let path = PathBuf::from(text_arg(path, "path")?);
        let inner = Dataset::load(&path)?;
        write_out(out, PdlDataset { inner })
    })
}

/// Writes `dataset` to the directory `path`.
///
/// # Safety
/// `dataset` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pdl_dataset_save(dataset: *const PdlDataset, path: *const c_char) -> i32 {
    guard(|| {
        let ds = non_null(dataset, "dataset")?;
        let path = PathBuf::from(text_arg(path, "path")?);
        std::fs::create_dir_all(&path).map_err(|e| Failure::new(PDL_ERR_IO, format!("{}: {e}", path.display())))?;
        ds.inner.save(&path, false)?;
        Ok(())
    })
}

/// Number of samples, or 0 for NULL.
///
/// # Safety
/// `dataset` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pdl_dataset_len(dataset: *const PdlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.samples.len())
}

/// Number of generator domains, or 0 for NULL.
///
/// # Safety
/// `dataset` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pdl_dataset_domains(dataset: *const PdlDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.inner.config.domains.len())
}

/// # Safety
/// `dataset` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pdl_dataset_free(dataset: *mut PdlDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Trains on every domain except `held_out_domain` from `config`. When
/// `out_dir` is non-NULL the run logs and checkpoints are written there.
///
/// # Safety
/// `dataset` is a live handle; `config` and `out_dir` are NULL or
/// NUL-terminated; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_train(
    dataset: *const PdlDataset,
    config: *const c_char,
    out_dir: *const c_char,
    out: *mut *mut PdlModel,
) -> i32 {
    guard(|| {
        let ds = non_null(dataset, "dataset")?;
        let cfg = config_arg(config)?;
        let dir = if out_dir.is_null() {
            None
        } else {
            let d = PathBuf::from(text_arg(out_dir, "out_dir")?);
            std::fs::create_dir_all(&d).map_err(|e| Failure::new(PDL_ERR_IO, format!("{}: {e}", d.display())))?;
            Some(d)
        };
        let outcome = train::train(&cfg, &ds.inner, dir.as_deref())?;
        let arch = cfg.architecture();
        let checkpoint = Checkpoint::new(&arch, &cfg.to_text(), &cfg.hash(), cfg.seed, cfg.epochs, outcome.params);
        write_out(out, model_from_checkpoint(checkpoint)?)
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_model_load(path: *const c_char, out: *mut *mut PdlModel) -> i32 {
    guard(|| {
        let path = PathBuf::from(text_arg(path, "path")?);
        write_out(out, model_from_checkpoint(Checkpoint::load(&path)?)?)
    })
}

/// Writes `model` as a checkpoint file.
///
/// # Safety
/// `model` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pdl_model_save(model: *const PdlModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = non_null(model, "model")?;
        let path = PathBuf::from(text_arg(path, "path")?);
        m.checkpoint.save(&path)?;
        Ok(())
    })
}

/// # Safety
/// `model` is NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pdl_model_free(model: *mut PdlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Live-class probabilities and labels (1 = live) for every sample of `domain`.
///
/// With `capacity` below the sample count nothing is scored: the count is
/// stored in `written` and `PDL_ERR_BUFFER` is returned, so a first call with
/// `capacity = 0` and NULL buffers queries the size.
///
/// # Safety
/// `model` and `dataset` are live handles; `scores` and `labels` hold at least
/// `capacity` doubles; `written` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_model_score(
    model: *const PdlModel,
    dataset: *const PdlDataset,
    domain: usize,
    scores: *mut f64,
    labels: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> i32 {
    guard(|| {
        let m = non_null(model, "model")?;
        let ds = non_null(dataset, "dataset")?;
        if written.is_null() {
            return Err(Failure::new(PDL_ERR_NULL, "written is NULL"));
        }
        check_image_size(m, ds)?;
        let split = split_leave_one_domain_out(&ds.inner, domain)?;
        let n = split.test.len();
        *written = n;
        if capacity < n {
            return Err(Failure::new(PDL_ERR_BUFFER, format!("domain {domain} has {n} samples, buffer holds {capacity}")));
        }
        if scores.is_null() || labels.is_null() {
            return Err(Failure::new(PDL_ERR_NULL, "score or label buffer is NULL"));
        }
        let images: Vec<_> = split.test.iter().map(|s| &s.image).collect();
        let probs = eval::score(&m.nets, &m.checkpoint.params, &images)?;
        let scores = std::slice::from_raw_parts_mut(scores, n);
        let labels = std::slice::from_raw_parts_mut(labels, n);
        for (i, s) in split.test.iter().enumerate() {
            scores[i] = probs[i];
            labels[i] = s.y();
        }
        Ok(())
    })
}

fn check_image_size(m: &PdlModel, ds: &PdlDataset) -> Result<(), Failure> {
    let (want, got) = (m.checkpoint.manifest.architecture.image_size, ds.inner.config.image_size);
    if want != got {
        return Err(Failure::new(
            PDL_ERR_MISMATCH,
            format!("dataset images are {got}px but the model expects {want}px"),
        ));
    }
    Ok(())
}

/// ROC AUC of `model` on every sample of `domain`.
///
/// # Safety
/// `model` and `dataset` are live handles; `auc` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_model_auc(model: *const PdlModel, dataset: *const PdlDataset, domain: usize, auc: *mut f64) -> i32 {
    guard(|| {
        let m = non_null(model, "model")?;
        let ds = non_null(dataset, "dataset")?;
        if auc.is_null() {
            return Err(Failure::new(PDL_ERR_NULL, "auc is NULL"));
        }
        check_image_size(m, ds)?;
        let split = split_leave_one_domain_out(&ds.inner, domain)?;
        let images: Vec<_> = split.test.iter().map(|s| &s.image).collect();
        let probs = eval::score(&m.nets, &m.checkpoint.params, &images)?;
        let labels: Vec<f64> = split.test.iter().map(|s| s.y()).collect();
        *auc = eval::auc(&probs, &labels)?;
        Ok(())
    })
}

/// ROC AUC of `n` scores against 0/1 labels (1 = positive), ties at half weight.
///
/// # Safety
/// `scores` and `labels` hold `n` doubles; `out` points to writable storage.
#[no_mangle]
pub unsafe extern "C" fn pdl_auc(scores: *const f64, labels: *const f64, n: usize, out: *mut f64) -> i32 {
    guard(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(Failure::new(PDL_ERR_NULL, "scores, labels or out is NULL"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        if let Some(bad) = l.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Failure::new(PDL_ERR_INVALID, format!("labels must be 0 or 1, got {bad}")));
        }
        *out = eval::auc(s, l)?;
        Ok(())
    })
}
