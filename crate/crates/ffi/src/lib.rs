//! C ABI for the `las` transcriber.
//!
//! Handles are opaque pointers owned by the caller and released with the
//! matching `*_free`. Every fallible call returns a [`LasStatus`]; on failure
//! [`las_last_error`] describes the most recent error on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use las::beam::decode;
use las::eval::wer;
use las::lm::NGramModel;
use las::numerics::Tensor;
use las::training::Checkpoint;
use las::vocab::Vocabulary;
use las::LasError;

/// Result codes; zero is success.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Format = 4,
    InvalidArgument = 5,
    Numeric = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded model checkpoint.
pub struct LasModel {
    ckpt: Checkpoint,
}

/// A loaded n-gram language model.
pub struct LasLm {
    lm: NGramModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &LasError) -> LasStatus {
    match e {
        LasError::Io { .. } => LasStatus::Io,
        LasError::Format { .. } | LasError::MissingParam(_) => LasStatus::Format,
        LasError::NonFinite { .. } | LasError::Diverged { .. } => LasStatus::Numeric,
        _ => LasStatus::InvalidArgument,
    }
}

struct Failure(LasStatus, String);

impl From<LasError> for Failure {
    fn from(e: LasError) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LasStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LasStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(LasStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(LasStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// Message of the last failed call on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn las_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn las_model_load(path: *const c_char, out: *mut *mut LasModel) -> LasStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let ckpt = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LasModel { ckpt }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`las_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn las_model_free(model: *mut LasModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension the model expects per frame.
///
/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn las_model_input_dim(model: *const LasModel, out: *mut usize) -> LasStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.ckpt.model.input_dim;
        Ok(())
    })
}

/// Beam-decodes a row-major `frames x dim` feature matrix and writes the best
/// transcript, NUL-terminated, into `buf`. `*written` receives the transcript
/// length in bytes without the terminator; when `buf_len` is too small it still
/// receives the length and `LAS_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `features` must point to `frames * dim` floats and `buf` to `buf_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn las_decode(
    model: *const LasModel,
    features: *const f32,
    frames: usize,
    dim: usize,
    beam: u32,
    buf: *mut c_char,
    buf_len: usize,
    written: *mut usize,
) -> LasStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if features.is_null() || buf.is_null() || written.is_null() {
            return Err(null("features, buf or written"));
        }
        let n = frames
            .checked_mul(dim)
            .ok_or_else(|| Failure(LasStatus::InvalidArgument, "frames * dim overflows".into()))?;
        let data = std::slice::from_raw_parts(features, n).to_vec();
        let x = Tensor::matrix(frames, dim, data)?;
        let r = decode(&m.ckpt.params, &m.ckpt.model, &x, beam as usize, None, None)?;
        let text = r.best().map(|h| h.text(&Vocabulary::standard())).unwrap_or_default();
        *written = text.len();
        if text.len() >= buf_len {
            return Err(Failure(
                LasStatus::BufferTooSmall,
                format!("transcript needs {} bytes plus terminator", text.len()),
            ));
        }
        ptr::copy_nonoverlapping(text.as_ptr(), buf as *mut u8, text.len());
        *buf.add(text.len()) = 0;
        Ok(())
    })
}

/// Loads an n-gram model file into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn las_lm_load(path: *const c_char, out: *mut *mut LasLm) -> LasStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let lm = NGramModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(LasLm { lm }));
        Ok(())
    })
}

/// Releases a language model; null is ignored.
///
/// # Safety
/// `lm` must come from [`las_lm_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn las_lm_free(lm: *mut LasLm) {
    if !lm.is_null() {
        drop(Box::from_raw(lm));
    }
}

/// Natural-log probability of a normalized sentence.
///
/// # Safety
/// `lm` and `out` must be valid; `text` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn las_lm_log_prob(lm: *const LasLm, text: *const c_char, out: *mut f64) -> LasStatus {
    guard(|| {
        let lm = lm.as_ref().ok_or_else(|| null("lm"))?;
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = lm.lm.log_prob(text);
        Ok(())
    })
}

/// Word error rate in percent of `hyp` against `reference`.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn las_wer(reference: *const c_char, hyp: *const c_char, out: *mut f64) -> LasStatus {
    guard(|| {
        let r = str_arg(reference, "reference")?;
        let h = str_arg(hyp, "hyp")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = wer(r, h)?.percent();
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn las_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
