//! C interface to the forecaster and the synthetic generator.
//!
//! Objects cross the boundary as opaque pointers created by `*_new`/`*_load`
//! functions and released by the matching `*_free`. Every fallible call
//! returns a [`CsnStatus`]; on failure a message is available from
//! [`csn_last_error`] until the next failing call on the same thread.
//! Arrays are row-major `double` buffers whose lengths are passed alongside.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use crossscale::model::{load_checkpoint, save_checkpoint, CrossScaleNet, Forecaster, ModelConfig};
use crossscale::synth::{self, SynthData};
use crossscale::tensor::Tensor;
use crossscale::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Shape = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A trained or freshly initialized model.
pub struct CsnModel {
    inner: CrossScaleNet,
}

/// A generated synthetic dataset: features plus the target as last column.
pub struct CsnDataset {
    inner: SynthData,
    table: Tensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CsnStatus {
    use crossscale::tensor::TensorError as T;
    match e {
        Error::Io(_) => CsnStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => CsnStatus::Checkpoint,
        Error::Tensor(T::NonFinite { .. } | T::DivisionByZero { .. })
        | Error::Divergence { .. } => CsnStatus::Numeric,
        Error::Tensor(_) => CsnStatus::Shape,
        Error::Config(_) | Error::Data(_) | Error::Unknown { .. } => CsnStatus::InvalidArgument,
    }
}

struct Fail(CsnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CsnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsnStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CsnStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CsnStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CsnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_slice<'a>(
    p: *mut f64,
    len: usize,
    needed: usize,
    what: &str,
) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len < needed {
        return Err(Fail(
            CsnStatus::BufferTooSmall,
            format!("{what} holds {len} values, {needed} required"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, needed))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn csn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Builds a model from a JSON `ModelConfig` with seeded initialization.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csn_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut CsnModel,
) -> CsnStatus {
    guard(|| {
        let json = str_arg(config_json, "config_json")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let config: ModelConfig = crossscale::pipeline::parse_json(json)?;
        let inner = CrossScaleNet::new(config, seed)?;
        *out = Box::into_raw(Box::new(CsnModel { inner }));
        Ok(())
    })
}

/// Loads a checkpoint written by the training tool.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csn_model_load(path: *const c_char, out: *mut *mut CsnModel) -> CsnStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_checkpoint(path)?;
        *out = Box::into_raw(Box::new(CsnModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a valid handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn csn_model_save(model: *const CsnModel, path: *const c_char) -> CsnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let path = str_arg(path, "path")?;
        save_checkpoint(&m.inner, path)?;
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from `csn_model_new`/`csn_model_load` and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn csn_model_free(model: *mut CsnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Lookback, horizon and feature count of a model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csn_model_dims(
    model: *const CsnModel,
    lookback: *mut usize,
    horizon: *mut usize,
    n_features: *mut usize,
) -> CsnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if lookback.is_null() || horizon.is_null() || n_features.is_null() {
            return Err(null("output dimension"));
        }
        *lookback = m.inner.config.lookback;
        *horizon = m.inner.config.horizon;
        *n_features = m.inner.config.n_features;
        Ok(())
    })
}

/// Forecasts `batch` windows. `input` holds `batch * lookback * n_features`
/// values; `output` receives `batch * horizon * n_features`.
///
/// # Safety
/// `input` must hold `input_len` readable values and `output` `output_len`
/// writable ones.
#[no_mangle]
pub unsafe extern "C" fn csn_model_forward(
    model: *const CsnModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    output: *mut f64,
    output_len: usize,
) -> CsnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.inner.config;
        let x = read_windows(input, input_len, batch, c.lookback, c.n_features)?;
        let y = m.inner.predict(&x)?;
        out_slice(output, output_len, y.numel(), "output")?.copy_from_slice(y.data());
        Ok(())
    })
}

/// Attention saliency over the lookback, averaged over `batch` windows and
/// max-normalized; `output` receives `lookback` values.
///
/// # Safety
/// As for [`csn_model_forward`].
#[no_mangle]
pub unsafe extern "C" fn csn_model_saliency(
    model: *const CsnModel,
    input: *const f64,
    input_len: usize,
    batch: usize,
    output: *mut f64,
    output_len: usize,
) -> CsnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let c = &m.inner.config;
        let x = read_windows(input, input_len, batch, c.lookback, c.n_features)?;
        let (_, records) = m.inner.predict_with_attention(&x)?;
        let s = crossscale::explain::aggregate_saliency(&records, c.lookback)?;
        out_slice(output, output_len, s.len(), "output")?.copy_from_slice(s.values());
        Ok(())
    })
}

unsafe fn read_windows(
    input: *const f64,
    len: usize,
    batch: usize,
    t: usize,
    f: usize,
) -> Result<Tensor, Fail> {
    if input.is_null() {
        return Err(null("input"));
    }
    let needed = batch * t * f;
    if batch == 0 || len != needed {
        return Err(Fail(
            CsnStatus::Shape,
            format!("input holds {len} values, expected {batch} x {t} x {f} = {needed}"),
        ));
    }
    let data = std::slice::from_raw_parts(input, len).to_vec();
    Ok(Tensor::new(vec![batch, t, f], data).map_err(Error::from)?)
}

/// Generates a built-in synthetic dataset (`"SYN1"` .. `"SYN8"`).
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn csn_synth_generate(
    name: *const c_char,
    n_samples: usize,
    seed: u64,
    out: *mut *mut CsnDataset,
) -> CsnStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = synth::SynthSpec {
            n_samples,
            seed,
            ..synth::builtin_spec(name)?
        };
        let inner = synth::generate(&spec)?;
        let table = inner.table();
        *out = Box::into_raw(Box::new(CsnDataset { inner, table }));
        Ok(())
    })
}

/// Rows and columns (features plus target) of a dataset.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn csn_dataset_shape(
    data: *const CsnDataset,
    rows: *mut usize,
    cols: *mut usize,
) -> CsnStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        if rows.is_null() || cols.is_null() {
            return Err(null("output dimension"));
        }
        *rows = d.table.shape()[0];
        *cols = d.table.shape()[1];
        Ok(())
    })
}

/// Copies the row-major table into `output`.
///
/// # Safety
/// `output` must hold `output_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn csn_dataset_values(
    data: *const CsnDataset,
    output: *mut f64,
    output_len: usize,
) -> CsnStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        out_slice(output, output_len, d.table.numel(), "output")?.copy_from_slice(d.table.data());
        Ok(())
    })
}

/// Ground-truth mask `[lookback, n_features]` as 0/1 bytes.
///
/// # Safety
/// `output` must hold `output_len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn csn_dataset_mask(
    data: *const CsnDataset,
    lookback: usize,
    output: *mut u8,
    output_len: usize,
) -> CsnStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        let truth = synth::ground_truth_mask(&d.inner.spec, lookback)?;
        if output.is_null() {
            return Err(null("output"));
        }
        if output_len < truth.mask.len() {
            return Err(Fail(
                CsnStatus::BufferTooSmall,
                format!(
                    "output holds {output_len} bytes, {} required",
                    truth.mask.len()
                ),
            ));
        }
        let out = std::slice::from_raw_parts_mut(output, truth.mask.len());
        for (o, &b) in out.iter_mut().zip(&truth.mask) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// # Safety
/// `data` must come from `csn_synth_generate` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn csn_dataset_free(data: *mut CsnDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}
