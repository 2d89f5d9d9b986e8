//! C ABI over the strumpl library.
//!
//! Every fallible call returns a [`StrumplStatus`] code; on failure the
//! message is kept per thread and read with [`strumpl_last_error`]. Handles
//! are opaque and released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use strumpl::config::ExperimentConfig;
use strumpl::model::{self, load_checkpoint, ModelParams};
use strumpl::tensor::Tensor;
use strumpl::trainer::{self, RunManifest, RunOptions, CHECKPOINT_FILE};
use strumpl::world::{self, Dataset, NormStats, Split};
use strumpl::Error;

/// Status codes; the non-zero values below 5 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrumplStatus {
    Ok = 0,
    Internal = 1,
    Config = 2,
    Missing = 3,
    Incompatible = 4,
    NullPointer = 5,
    InvalidArgument = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrumplSplit {
    Train = 0,
    Val = 1,
    Test = 2,
}

/// A generated or loaded synthetic world.
pub struct StrumplDataset {
    inner: Dataset,
}

/// Trained parameters with the normalisation they were trained under.
pub struct StrumplModel {
    params: ModelParams,
    norm: NormStats,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> StrumplStatus {
    match e {
        Error::Config(_) => StrumplStatus::Config,
        Error::Missing(_) => StrumplStatus::Missing,
        Error::Incompatible(_) => StrumplStatus::Incompatible,
        _ => StrumplStatus::Internal,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StrumplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            StrumplStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("{what} is null"));
            StrumplStatus::NullPointer
        }
        Ok(Err(Fail::Arg(m))) => {
            set_error(m);
            StrumplStatus::InvalidArgument
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            StrumplStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not valid UTF-8")))
}

unsafe fn config(p: *const c_char) -> Result<ExperimentConfig, Fail> {
    if p.is_null() {
        return Ok(ExperimentConfig::default());
    }
    Ok(ExperimentConfig::from_toml(text(p, "config")?)?)
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

fn out_ptr<T>(p: *mut T, what: &'static str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(())
    }
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn strumpl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn strumpl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Draws the world described by the `[world]` section of `config_toml`
/// (library defaults when null).
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn strumpl_dataset_generate(
    config_toml: *const c_char,
    out: *mut *mut StrumplDataset,
) -> StrumplStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let cfg = config(config_toml)?;
        let inner = world::generate_world(&cfg.world)?;
        *out = Box::into_raw(Box::new(StrumplDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn strumpl_dataset_load(dir: *const c_char, out: *mut *mut StrumplDataset) -> StrumplStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dir = PathBuf::from(text(dir, "dir")?);
        let inner = world::load_dataset(&dir)?;
        *out = Box::into_raw(Box::new(StrumplDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `dir` must be a NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn strumpl_dataset_save(ds: *const StrumplDataset, dir: *const c_char) -> StrumplStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        let dir = PathBuf::from(text(dir, "dir")?);
        world::save_dataset(&ds.inner, &dir)?;
        Ok(())
    })
}

/// Patch count of one split.
///
/// # Safety
/// `ds` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn strumpl_dataset_len(
    ds: *const StrumplDataset,
    split: StrumplSplit,
    out: *mut usize,
) -> StrumplStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        out_ptr(out, "out")?;
        *out = ds.inner.split(to_split(split)).len();
        Ok(())
    })
}

fn to_split(s: StrumplSplit) -> Split {
    match s {
        StrumplSplit::Train => Split::Train,
        StrumplSplit::Val => Split::Val,
        StrumplSplit::Test => Split::Test,
    }
}

/// # Safety
/// `ds` must be null or come from [`strumpl_dataset_generate`] or [`strumpl_dataset_load`].
#[no_mangle]
pub unsafe extern "C" fn strumpl_dataset_free(ds: *mut StrumplDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Trains one model with the sections of `config_toml` (defaults when null).
/// With a non-null `run_dir` the run directory files are written there.
///
/// # Safety
/// `ds` must come from this library; string arguments must be null or
/// NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn strumpl_train(
    ds: *const StrumplDataset,
    config_toml: *const c_char,
    run_dir: *const c_char,
    out: *mut *mut StrumplModel,
) -> StrumplStatus {
    guard(|| {
        let ds = handle(ds, "dataset")?;
        out_ptr(out, "out")?;
        let mut cfg = config(config_toml)?;
        cfg.model.c_in = ds.inner.config.c_in;
        cfg.model.k = ds.inner.config.k;
        cfg.model.validate()?;
        let dir = if run_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(text(run_dir, "run_dir")?))
        };
        let opts = RunOptions {
            dir,
            dataset_hash: None,
            verbose: false,
        };
        let run = trainer::train(&ds.inner, &cfg.model, &cfg.loss, &cfg.train, &opts)?;
        *out = Box::into_raw(Box::new(StrumplModel {
            params: run.best,
            norm: run.norm,
        }));
        Ok(())
    })
}

/// Loads the best checkpoint of a run directory.
///
/// # Safety
/// `run_dir` must be a NUL-terminated path; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn strumpl_model_load(run_dir: *const c_char, out: *mut *mut StrumplModel) -> StrumplStatus {
    guard(|| {
        out_ptr(out, "out")?;
        let dir = PathBuf::from(text(run_dir, "run_dir")?);
        let manifest = RunManifest::load(&dir)?;
        let params = load_checkpoint(&dir.join(CHECKPOINT_FILE), Some(&manifest.model))?;
        *out = Box::into_raw(Box::new(StrumplModel {
            params,
            norm: manifest.norm,
        }));
        Ok(())
    })
}

/// Covariate channels and output variables of a model.
///
/// # Safety
/// `m` must come from this library; `c_in` and `k` must be writable.
#[no_mangle]
pub unsafe extern "C" fn strumpl_model_shape(m: *const StrumplModel, c_in: *mut usize, k: *mut usize) -> StrumplStatus {
    guard(|| {
        let m = handle(m, "model")?;
        out_ptr(c_in, "c_in")?;
        out_ptr(k, "k")?;
        *c_in = m.params.config.c_in;
        *k = m.params.config.k;
        Ok(())
    })
}

/// Predicts every variable in physical units. `covariates` is `[c_in, h, w]`
/// row-major; `out` receives `[k, h, w]` and must hold `out_len` values.
///
/// # Safety
/// `covariates` must point to `c_in*h*w` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn strumpl_model_predict(
    m: *const StrumplModel,
    covariates: *const f64,
    c_in: usize,
    h: usize,
    w: usize,
    out: *mut f64,
    out_len: usize,
) -> StrumplStatus {
    guard(|| {
        let m = handle(m, "model")?;
        if covariates.is_null() {
            return Err(Fail::Null("covariates"));
        }
        out_ptr(out, "out")?;
        let k = m.params.config.k;
        if c_in != m.params.config.c_in {
            return Err(Error::Incompatible(format!("model expects {} covariate channels, got {c_in}", m.params.config.c_in)).into());
        }
        if h == 0 || w == 0 || out_len != k * h * w {
            return Err(Fail::Arg(format!("output buffer needs {} values for a {h}x{w} patch", k * h * w)));
        }
        let x = Tensor::new([c_in, h, w], std::slice::from_raw_parts(covariates, c_in * h * w).to_vec())?;
        let pred = model::predict(&m.params, &x)?;
        let y = m.norm.invert(&pred.y_hat);
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Per-variable RMSE and bias on every pixel of the test split; both arrays
/// must hold `k` values.
///
/// # Safety
/// `m` and `ds` must come from this library; `rmse` and `bias` must point to `k` doubles.
#[no_mangle]
pub unsafe extern "C" fn strumpl_evaluate(
    m: *const StrumplModel,
    ds: *const StrumplDataset,
    rmse: *mut f64,
    bias: *mut f64,
    k: usize,
) -> StrumplStatus {
    guard(|| {
        let m = handle(m, "model")?;
        let ds = handle(ds, "dataset")?;
        out_ptr(rmse, "rmse")?;
        out_ptr(bias, "bias")?;
        if k != m.params.config.k {
            return Err(Fail::Arg(format!("model has {} variables, buffers hold {k}", m.params.config.k)));
        }
        let sp = strumpl::eval::predict_split(&m.params, ds.inner.split(Split::Test), &m.norm)?;
        for v in 0..k {
            let (r, b) = strumpl::eval::rmse_bias(&sp.pred[v], &sp.label[v], None)?;
            *rmse.add(v) = r;
            *bias.add(v) = b;
        }
        Ok(())
    })
}

/// # Safety
/// `m` must be null or come from [`strumpl_train`] or [`strumpl_model_load`].
#[no_mangle]
pub unsafe extern "C" fn strumpl_model_free(m: *mut StrumplModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}
