//! C ABI over `qlab`.
//!
//! Every function returns a [`QlabStatus`]. On failure the message is kept in
//! a thread-local slot readable through [`qlab_last_error`]. Objects cross the
//! boundary as opaque handles that the caller releases with the matching
//! `*_free` function. Panics are caught and reported as `QLAB_STATUS_PANIC`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use qlab::calibkit::{read_calibration, CalibrationSet};
use qlab::diagnostics::{delta_ppl, spearman_rho};
use qlab::nanomodel::container::{load_qlb1, load_qlq1, save_qlb1, save_qlq1};
use qlab::nanomodel::{perplexity, quantize_model, InitOptions, Model, ModelConfig, NamedTensorStore, QuantizedStore};
use qlab::{ErrorKind, QlabError, QuantSpec};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QlabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    DataError = 4,
    NumericError = 5,
    IoError = 6,
    Panic = 7,
}

/// Full-precision model weights.
pub struct QlabModel {
    store: NamedTensorStore,
}

/// Quantized model weights.
pub struct QlabQuantized {
    store: QuantizedStore,
}

pub struct QlabCalibration {
    set: CalibrationSet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Invalid(String),
    Lab(QlabError),
}

impl From<QlabError> for Failure {
    fn from(e: QlabError) -> Self {
        Failure::Lab(e)
    }
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> QlabStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return QlabStatus::Ok,
        Ok(Err(Failure::Null(arg))) => (QlabStatus::NullArgument, format!("`{arg}` is null")),
        Ok(Err(Failure::Invalid(m))) => (QlabStatus::InvalidArgument, m),
        Ok(Err(Failure::Lab(e))) => {
            let status = match e.kind() {
                ErrorKind::Config => QlabStatus::ConfigError,
                ErrorKind::Data => QlabStatus::DataError,
                ErrorKind::Numeric => QlabStatus::NumericError,
                ErrorKind::Io => QlabStatus::IoError,
            };
            (status, format!("{}: {e}", e.tag()))
        }
        Err(payload) => {
            let m = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            (QlabStatus::Panic, format!("panic: {m}"))
        }
    };
    set_error(msg);
    status
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Invalid(format!("`{name}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(out: *mut T, v: T, name: &'static str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null(name));
    }
    out.write(v);
    Ok(())
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> Result<T, Failure> {
    serde_json::from_str(text).map_err(|e| Failure::Lab(QlabError::config("", format!("{what}: {e}"))))
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next `qlab_*` call on the same thread.
#[no_mangle]
pub extern "C" fn qlab_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Random model. `config_json` holds `ModelConfig` fields (missing ones take
/// defaults) and may be NULL for the default configuration.
#[no_mangle]
pub unsafe extern "C" fn qlab_model_init_random(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut QlabModel,
) -> QlabStatus {
    guard(|| {
        let cfg: ModelConfig = if config_json.is_null() {
            ModelConfig::default()
        } else {
            parse_json(str_arg(config_json, "config_json")?, "model config")?
        };
        let store = NamedTensorStore::init_random(&cfg, &InitOptions::default(), seed)?;
        write_out(out, Box::into_raw(Box::new(QlabModel { store })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_model_load(path: *const c_char, out: *mut *mut QlabModel) -> QlabStatus {
    guard(|| {
        let store = load_qlb1(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(QlabModel { store })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_model_save(model: *const QlabModel, path: *const c_char) -> QlabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        save_qlb1(&model.store, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Perplexity over non-overlapping context windows of `tokens`.
#[no_mangle]
pub unsafe extern "C" fn qlab_model_perplexity(
    model: *const QlabModel,
    tokens: *const u32,
    n_tokens: usize,
    out_ppl: *mut f64,
) -> QlabStatus {
    guard(|| {
        let model = Model::from_store(&ref_arg(model, "model")?.store)?;
        let stream = slice_arg(tokens, n_tokens, "tokens")?;
        let ppl = perplexity(&model, stream, model.config().context_length)?;
        write_out(out_ppl, ppl, "out_ppl")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_model_free(model: *mut QlabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reads a calibration set written by `qlab calib build`.
#[no_mangle]
pub unsafe extern "C" fn qlab_calibration_load(path: *const c_char, out: *mut *mut QlabCalibration) -> QlabStatus {
    guard(|| {
        let set = read_calibration(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(QlabCalibration { set })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_calibration_num_examples(calib: *const QlabCalibration, out: *mut usize) -> QlabStatus {
    guard(|| {
        let n = ref_arg(calib, "calib")?.set.examples.len();
        write_out(out, n, "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_calibration_free(calib: *mut QlabCalibration) {
    if !calib.is_null() {
        drop(Box::from_raw(calib));
    }
}

/// Quantizes every layer projection. `spec_json` is a quantization spec such
/// as `{"method":"gptq","bits":4,"group_size":128}`. `calib` may be NULL for
/// RTN only.
#[no_mangle]
pub unsafe extern "C" fn qlab_quantize(
    model: *const QlabModel,
    calib: *const QlabCalibration,
    spec_json: *const c_char,
    out: *mut *mut QlabQuantized,
) -> QlabStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        let spec: QuantSpec = parse_json(str_arg(spec_json, "spec_json")?, "quant spec")?;
        let calib = calib.as_ref().map(|c| &c.set);
        let outcome = quantize_model(&model.store, calib, &spec)?;
        write_out(out, Box::into_raw(Box::new(QlabQuantized { store: outcome.store })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_quantized_load(path: *const c_char, out: *mut *mut QlabQuantized) -> QlabStatus {
    guard(|| {
        let store = load_qlq1(Path::new(str_arg(path, "path")?))?;
        write_out(out, Box::into_raw(Box::new(QlabQuantized { store })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_quantized_save(q: *const QlabQuantized, path: *const c_char) -> QlabStatus {
    guard(|| {
        let q = ref_arg(q, "q")?;
        save_qlq1(&q.store, Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_quantized_perplexity(
    q: *const QlabQuantized,
    tokens: *const u32,
    n_tokens: usize,
    out_ppl: *mut f64,
) -> QlabStatus {
    guard(|| {
        let model = ref_arg(q, "q")?.store.to_model()?;
        let stream = slice_arg(tokens, n_tokens, "tokens")?;
        let ppl = perplexity(&model, stream, model.config().context_length)?;
        write_out(out_ppl, ppl, "out_ppl")
    })
}

/// Dequantized copy in the original parameterization.
#[no_mangle]
pub unsafe extern "C" fn qlab_quantized_to_model(q: *const QlabQuantized, out: *mut *mut QlabModel) -> QlabStatus {
    guard(|| {
        let store = ref_arg(q, "q")?.store.to_dense()?;
        write_out(out, Box::into_raw(Box::new(QlabModel { store })), "out")
    })
}

#[no_mangle]
pub unsafe extern "C" fn qlab_quantized_free(q: *mut QlabQuantized) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// `baseline - other`; both must be positive and finite.
#[no_mangle]
pub unsafe extern "C" fn qlab_delta_ppl(baseline: f64, other: f64, out: *mut f64) -> QlabStatus {
    guard(|| write_out(out, delta_ppl(baseline, other)?, "out"))
}

/// Spearman rank correlation with average ranks for ties. `out_degenerate`
/// may be NULL; it is set when either input is constant (rho is then 0).
#[no_mangle]
pub unsafe extern "C" fn qlab_spearman(
    x: *const f64,
    y: *const f64,
    n: usize,
    out_rho: *mut f64,
    out_degenerate: *mut bool,
) -> QlabStatus {
    guard(|| {
        let r = spearman_rho(slice_arg(x, n, "x")?, slice_arg(y, n, "y")?)?;
        if !out_degenerate.is_null() {
            out_degenerate.write(r.degenerate);
        }
        write_out(out_rho, r.rho, "out_rho")
    })
}
