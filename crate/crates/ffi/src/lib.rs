//! C ABI over the dttn classifier. Callers hold models through opaque
//! pointers, every entry point returns a status code, and the text of the
//! most recent failure is kept per thread for retrieval with
//! [`dttn_last_error`]. The matching header `include/dttn.h` is generated
//! by cbindgen at build time.
//!
//! Pixel buffers are `f32` row-major NCHW regardless of the model's
//! internal arithmetic width; an `f64` model converts at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dttn::model::{Dttn, ModelConfig};
use dttn::tensor::{Dtype, Scalar, Tensor};
use dttn::{checkpoint, config, train, DttnError};

/// Result of every fallible call. Anything but `Ok` leaves a message
/// readable through [`dttn_last_error`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DttnStatus {
    /// The call succeeded.
    Ok = 0,
    /// A pointer was null or a size did not match the model geometry.
    InvalidArgument = 1,
    /// The configuration text was rejected.
    Config = 2,
    /// The file could not be read.
    Io = 3,
    /// The file was read but its contents did not decode.
    Format = 4,
    /// Arithmetic produced a non-finite or singular result.
    Numeric = 5,
    /// The call is not valid in the model's current state.
    State = 6,
    /// An internal invariant failed.
    Internal = 7,
}

/// Shape and size summary for a loaded model.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DttnModelInfo {
    /// Trained parameter count.
    pub trainable_params: u64,
    /// Persisted parameter count including normalization statistics.
    pub stored_params: u64,
    pub img_channels: u32,
    pub img_height: u32,
    pub img_width: u32,
    pub classes: u32,
    /// Interaction blocks across all stages.
    pub blocks: u32,
    /// True once `dttn_model_fold` has absorbed the normalizations.
    pub folded: bool,
}

enum Inner {
    F32(Dttn<f32>),
    F64(Dttn<f64>),
}

/// Opaque model handle; create with `dttn_model_from_config` or
/// `dttn_model_open`, release with `dttn_model_free`.
pub struct DttnModel {
    inner: Inner,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn remember(msg: impl std::fmt::Display) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
}

fn fail(status: DttnStatus, msg: impl std::fmt::Display) -> DttnStatus {
    remember(msg);
    status
}

fn fail_with(err: DttnError) -> DttnStatus {
    let status = match &err {
        DttnError::Dim(_) | DttnError::Index(_) | DttnError::Capacity(_) => {
            DttnStatus::InvalidArgument
        }
        DttnError::Config(_) => DttnStatus::Config,
        DttnError::Io(_) => DttnStatus::Io,
        DttnError::Format(_) => DttnStatus::Format,
        DttnError::Numeric(_) => DttnStatus::Numeric,
        DttnError::State(_) => DttnStatus::State,
    };
    fail(status, err)
}

fn guarded(body: impl FnOnce() -> DttnStatus) -> DttnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(DttnStatus::Internal, "internal panic"),
    }
}

/// ABI revision of this header; bumped on any incompatible change.
#[no_mangle]
pub extern "C" fn dttn_api_version() -> u32 {
    1
}

/// Message for the most recent failure on the calling thread, empty if the
/// last call succeeded. The pointer stays valid until the next failing
/// dttn call on the same thread.
#[no_mangle]
pub extern "C" fn dttn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

unsafe fn text_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, DttnStatus> {
    if ptr.is_null() {
        return Err(fail(
            DttnStatus::InvalidArgument,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail(
            DttnStatus::InvalidArgument,
            format!("{what} is not valid UTF-8"),
        )
    })
}

fn emit_model(model: DttnModel, out: *mut *mut DttnModel) -> DttnStatus {
    unsafe {
        *out = Box::into_raw(Box::new(model));
    }
    remember("");
    DttnStatus::Ok
}

fn build_model(cfg: &ModelConfig) -> Result<Inner, DttnError> {
    Ok(match cfg.dtype {
        Dtype::F32 => Inner::F32(Dttn::build(cfg)?),
        Dtype::F64 => Inner::F64(Dttn::build(cfg)?),
    })
}

/// Builds a freshly initialized model from configuration text: `key = value`
/// lines using the same keys as the command-line tool, empty text for the
/// defaults.
///
/// # Safety
/// `config_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_from_config(
    config_text: *const c_char,
    out: *mut *mut DttnModel,
) -> DttnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DttnStatus::InvalidArgument, "out is null");
        }
        let text = match text_arg(config_text, "config_text") {
            Ok(t) => t,
            Err(status) => return status,
        };
        let cfg = match config::resolve(Some(text), &[]) {
            Ok(c) => c,
            Err(e) => return fail_with(e),
        };
        match build_model(&cfg.model) {
            Ok(inner) => emit_model(DttnModel { inner }, out),
            Err(e) => fail_with(e),
        }
    })
}

fn open_typed<T: Scalar>(path: &Path) -> Result<Dttn<T>, DttnError> {
    let ck = checkpoint::load::<T>(path)?;
    let cfg = config::resolve(Some(&ck.config), &[])?;
    train::model_from_checkpoint(&ck, &cfg.model)
}

/// Opens a checkpoint written by the trainer and restores its model. The
/// arithmetic width recorded in the file decides the in-memory width.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_open(
    path: *const c_char,
    out: *mut *mut DttnModel,
) -> DttnStatus {
    guarded(|| {
        if out.is_null() {
            return fail(DttnStatus::InvalidArgument, "out is null");
        }
        let path = match text_arg(path, "path") {
            Ok(p) => Path::new(p).to_path_buf(),
            Err(status) => return status,
        };
        let inner = match checkpoint::peek_dtype(&path) {
            Ok(Dtype::F32) => open_typed::<f32>(&path).map(Inner::F32),
            Ok(Dtype::F64) => open_typed::<f64>(&path).map(Inner::F64),
            Err(e) => return fail_with(e),
        };
        match inner {
            Ok(inner) => emit_model(DttnModel { inner }, out),
            Err(e) => fail_with(e),
        }
    })
}

/// Releases a model handle; a null pointer is ignored.
///
/// # Safety
/// `model` must have come from a dttn constructor and not been freed.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_free(model: *mut DttnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn info_of<T: Scalar>(model: &Dttn<T>) -> DttnModelInfo {
    let census = model.enumerate_params();
    DttnModelInfo {
        trainable_params: census.total.trainable(),
        stored_params: census.total.stored(),
        img_channels: model.cfg.img_channels as u32,
        img_height: model.cfg.img_size.0 as u32,
        img_width: model.cfg.img_size.1 as u32,
        classes: model.cfg.classes as u32,
        blocks: model.cfg.total_blocks() as u32,
        folded: model.folded,
    }
}

/// Fills `out` with the model's geometry and parameter counts.
///
/// # Safety
/// Both pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_info(
    model: *const DttnModel,
    out: *mut DttnModelInfo,
) -> DttnStatus {
    guarded(|| {
        if model.is_null() || out.is_null() {
            return fail(DttnStatus::InvalidArgument, "model or out is null");
        }
        let info = match &(*model).inner {
            Inner::F32(m) => info_of(m),
            Inner::F64(m) => info_of(m),
        };
        *out = info;
        remember("");
        DttnStatus::Ok
    })
}

/// Absorbs normalizations and residual gains into the surrounding weights.
/// Predictions are unchanged up to rounding; the model can no longer train.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_fold(model: *mut DttnModel) -> DttnStatus {
    guarded(|| {
        if model.is_null() {
            return fail(DttnStatus::InvalidArgument, "model is null");
        }
        let handle = &mut *model;
        let folded = match &handle.inner {
            Inner::F32(m) => m.fold().map(Inner::F32),
            Inner::F64(m) => m.fold().map(Inner::F64),
        };
        match folded {
            Ok(inner) => {
                handle.inner = inner;
                remember("");
                DttnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

fn run_batch<T: Scalar>(
    model: &Dttn<T>,
    pixels: &[f32],
    batch: usize,
) -> Result<Tensor<T>, DttnError> {
    let (c, (h, w)) = (model.cfg.img_channels, model.cfg.img_size);
    let want = batch * c * h * w;
    if pixels.len() != want {
        return Err(DttnError::Dim(format!(
            "pixel buffer holds {} values but batch {batch} of {c}x{h}x{w} images needs {want}",
            pixels.len()
        )));
    }
    let data: Vec<T> = pixels.iter().map(|&v| T::from_f64(v as f64)).collect();
    let x = Tensor::new(vec![batch, c, h, w], data)?;
    if model.folded {
        model.forward_inference(&x)
    } else {
        model.forward_eval(&x)
    }
}

/// Runs the model on `batch` images packed channel-major into `pixels` and
/// writes `batch * classes` raw scores into `logits`.
///
/// # Safety
/// `pixels` must hold `pixel_count` readable floats and `logits`
/// `logit_count` writable floats.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_logits(
    model: *const DttnModel,
    pixels: *const f32,
    pixel_count: usize,
    batch: usize,
    logits: *mut f32,
    logit_count: usize,
) -> DttnStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || logits.is_null() {
            return fail(DttnStatus::InvalidArgument, "model, pixels, or logits is null");
        }
        if batch == 0 {
            return fail(DttnStatus::InvalidArgument, "batch must be positive");
        }
        let handle = &*model;
        let classes = match &handle.inner {
            Inner::F32(m) => m.cfg.classes,
            Inner::F64(m) => m.cfg.classes,
        };
        if logit_count != batch * classes {
            return fail(
                DttnStatus::InvalidArgument,
                format!(
                    "logit buffer holds {logit_count} values but batch {batch} of {classes} classes needs {}",
                    batch * classes
                ),
            );
        }
        let input = std::slice::from_raw_parts(pixels, pixel_count);
        let out = std::slice::from_raw_parts_mut(logits, logit_count);
        let result = match &handle.inner {
            Inner::F32(m) => run_batch(m, input, batch).map(|y| {
                out.copy_from_slice(y.data());
            }),
            Inner::F64(m) => run_batch(m, input, batch).map(|y| {
                for (dst, &v) in out.iter_mut().zip(y.data()) {
                    *dst = v as f32;
                }
            }),
        };
        match result {
            Ok(()) => {
                remember("");
                DttnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

/// Runs the model and writes the winning class per image into `labels`;
/// ties resolve to the lowest class index.
///
/// # Safety
/// `pixels` must hold `pixel_count` readable floats and `labels`
/// `label_count` writable entries.
#[no_mangle]
pub unsafe extern "C" fn dttn_model_predict(
    model: *const DttnModel,
    pixels: *const f32,
    pixel_count: usize,
    batch: usize,
    labels: *mut u32,
    label_count: usize,
) -> DttnStatus {
    guarded(|| {
        if model.is_null() || pixels.is_null() || labels.is_null() {
            return fail(DttnStatus::InvalidArgument, "model, pixels, or labels is null");
        }
        if batch == 0 {
            return fail(DttnStatus::InvalidArgument, "batch must be positive");
        }
        if label_count != batch {
            return fail(
                DttnStatus::InvalidArgument,
                format!("label buffer holds {label_count} entries but batch is {batch}"),
            );
        }
        let handle = &*model;
        let input = std::slice::from_raw_parts(pixels, pixel_count);
        let out = std::slice::from_raw_parts_mut(labels, label_count);
        let scores = match &handle.inner {
            Inner::F32(m) => run_batch(m, input, batch).map(|y| argmax_rows_f(y.data(), batch)),
            Inner::F64(m) => run_batch(m, input, batch).map(|y| argmax_rows_f(y.data(), batch)),
        };
        match scores {
            Ok(rows) => {
                for (dst, v) in out.iter_mut().zip(rows) {
                    *dst = v;
                }
                remember("");
                DttnStatus::Ok
            }
            Err(e) => fail_with(e),
        }
    })
}

fn argmax_rows_f<T: Scalar>(data: &[T], rows: usize) -> Vec<u32> {
    let cols = data.len() / rows;
    (0..rows)
        .map(|r| {
            let row = &data[r * cols..][..cols];
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = i;
                }
            }
            best as u32
        })
        .collect()
}
