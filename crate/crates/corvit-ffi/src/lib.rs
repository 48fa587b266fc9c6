//! C ABI for the corvit classifier.
//!
//! All entry points follow the same conventions: a loaded model travels as
//! an opaque `CorvitModel*`; every fallible call returns a [`CorvitStatus`]
//! code and a human-readable message for the most recent failure is
//! available from [`corvit_last_error_message`] (thread-local, valid until
//! the next call on that thread). No call unwinds across the boundary.

#![deny(unsafe_op_in_unsafe_fn)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use corvit::metrics::softmax_rows;
use corvit::model::ModelState;
use corvit::preprocess::Image;
use corvit::relevance::relevance_propagate;

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorvitStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The operation failed; details via `corvit_last_error_message`.
    Runtime = 3,
    /// The library caught a panic; details via `corvit_last_error_message`.
    Panic = 4,
}

/// Opaque handle to a loaded model. Create with [`corvit_model_load`],
/// destroy with [`corvit_model_free`]. A handle must not be used from two
/// threads at once.
pub struct CorvitModel {
    inner: ModelState,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).unwrap_or_default();
    });
}

fn guard(op: &str, body: impl FnOnce() -> CorvitStatus) -> CorvitStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let detail = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(format!("{op}: internal panic: {detail}"));
            CorvitStatus::Panic
        }
    }
}

/// Most recent failure message on this thread. The pointer stays valid
/// until the next corvit call on the same thread; never free it.
#[no_mangle]
pub extern "C" fn corvit_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn corvit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a model checkpoint from `path` (NUL-terminated UTF-8) into
/// `*out_model`. On success the caller owns the handle and must release it
/// with [`corvit_model_free`].
///
/// # Safety
///
/// `path` must be null or point to a NUL-terminated string; `out_model`
/// must be null or point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn corvit_model_load(
    path: *const c_char,
    out_model: *mut *mut CorvitModel,
) -> CorvitStatus {
    guard("corvit_model_load", || {
        if path.is_null() || out_model.is_null() {
            set_error("corvit_model_load: null argument");
            return CorvitStatus::NullArgument;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("corvit_model_load: path is not valid UTF-8");
                return CorvitStatus::InvalidUtf8;
            }
        };
        match ModelState::load(Path::new(path)) {
            Ok(inner) => {
                let handle = Box::new(CorvitModel { inner });
                unsafe { *out_model = Box::into_raw(handle) };
                CorvitStatus::Ok
            }
            Err(e) => {
                set_error(format!("corvit_model_load: {e}"));
                CorvitStatus::Runtime
            }
        }
    })
}

/// Release a handle obtained from [`corvit_model_load`]. Passing null is a
/// no-op.
///
/// # Safety
///
/// `model` must be null or a handle from [`corvit_model_load`] that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn corvit_model_free(model: *mut CorvitModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of classes the model's head produces, or 0 if `model` is null.
///
/// # Safety
///
/// `model` must be null or a live handle from [`corvit_model_load`].
#[no_mangle]
pub unsafe extern "C" fn corvit_num_classes(model: *const CorvitModel) -> usize {
    if model.is_null() {
        return 0;
    }
    unsafe { &*model }.inner.vit.num_classes
}

/// Saliency grid dimensions (tokens per side of the feature map).
///
/// # Safety
///
/// `model` must be null or a live handle; the out-pointers must be null or
/// point to writable `usize` storage.
#[no_mangle]
pub unsafe extern "C" fn corvit_saliency_grid(
    model: *const CorvitModel,
    out_grid_h: *mut usize,
    out_grid_w: *mut usize,
) -> CorvitStatus {
    guard("corvit_saliency_grid", || {
        if model.is_null() || out_grid_h.is_null() || out_grid_w.is_null() {
            set_error("corvit_saliency_grid: null argument");
            return CorvitStatus::NullArgument;
        }
        let model = unsafe { &*model };
        match model.inner.backbone.grid_size() {
            Ok(g) => {
                unsafe {
                    *out_grid_h = g;
                    *out_grid_w = g;
                }
                CorvitStatus::Ok
            }
            Err(e) => {
                set_error(format!("corvit_saliency_grid: {e}"));
                CorvitStatus::Runtime
            }
        }
    })
}

fn image_from_raw(
    op: &str,
    pixels: *const f64,
    height: usize,
    width: usize,
) -> Result<Image, CorvitStatus> {
    if pixels.is_null() {
        set_error(format!("{op}: null pixel buffer"));
        return Err(CorvitStatus::NullArgument);
    }
    let len = height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| {
            set_error(format!("{op}: bad image dimensions {height}x{width}"));
            CorvitStatus::Runtime
        })?;
    let data = unsafe { std::slice::from_raw_parts(pixels, len) }.to_vec();
    Image::new(height, width, data).map_err(|e| {
        set_error(format!("{op}: {e}"));
        CorvitStatus::Runtime
    })
}

/// Classify a grayscale image given as `height * width` row-major doubles in
/// [0, 1]. Writes one probability per class (summing to 1) into `out_probs`,
/// which must hold [`corvit_num_classes`] doubles.
///
/// # Safety
///
/// `model` must be null or a live handle used by one thread at a time;
/// `pixels` must be null or `height * width` readable doubles; `out_probs`
/// must be null or writable for the class count.
#[no_mangle]
pub unsafe extern "C" fn corvit_classify(
    model: *mut CorvitModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    out_probs: *mut f64,
) -> CorvitStatus {
    guard("corvit_classify", || {
        if model.is_null() || out_probs.is_null() {
            set_error("corvit_classify: null argument");
            return CorvitStatus::NullArgument;
        }
        let model = unsafe { &mut *model };
        let img = match image_from_raw("corvit_classify", pixels, height, width) {
            Ok(img) => img,
            Err(status) => return status,
        };
        match model.inner.classify_image(&img) {
            Ok(logits) => {
                let probs = softmax_rows(&logits, logits.len());
                let out = unsafe { std::slice::from_raw_parts_mut(out_probs, probs.len()) };
                out.copy_from_slice(&probs);
                CorvitStatus::Ok
            }
            Err(e) => {
                set_error(format!("corvit_classify: {e}"));
                CorvitStatus::Runtime
            }
        }
    })
}

/// Relevance-propagation saliency for `target_class` on one grayscale
/// image. Writes the min-max-normalized `grid_h * grid_w` map (row-major)
/// into `out_map`, sized per [`corvit_saliency_grid`].
///
/// # Safety
///
/// `model` must be null or a live handle used by one thread at a time;
/// `pixels` must be null or `height * width` readable doubles; `out_map`
/// must be null or writable for the saliency grid size.
#[no_mangle]
pub unsafe extern "C" fn corvit_saliency(
    model: *mut CorvitModel,
    pixels: *const f64,
    height: usize,
    width: usize,
    target_class: usize,
    out_map: *mut f64,
) -> CorvitStatus {
    guard("corvit_saliency", || {
        if model.is_null() || out_map.is_null() {
            set_error("corvit_saliency: null argument");
            return CorvitStatus::NullArgument;
        }
        let model = unsafe { &mut *model };
        let img = match image_from_raw("corvit_saliency", pixels, height, width) {
            Ok(img) => img,
            Err(status) => return status,
        };
        let result = model
            .inner
            .preprocess(&img)
            .and_then(|x| model.inner.forward(&x, true, false))
            .and_then(|(mut tape, _, trace)| relevance_propagate(&mut tape, &trace, target_class));
        match result {
            Ok(map) => {
                let out =
                    unsafe { std::slice::from_raw_parts_mut(out_map, map.normalized.len()) };
                out.copy_from_slice(&map.normalized);
                CorvitStatus::Ok
            }
            Err(e) => {
                set_error(format!("corvit_saliency: {e}"));
                CorvitStatus::Runtime
            }
        }
    })
}
