//! C ABI over the packed-model inference engine.
//!
//! A model handle owns a loaded packed model bound to one bit-width. Every
//! function returns an [`ApdnnStatus`]; on failure a message for the calling
//! thread is available from [`apdnn_last_error`]. Handles are not
//! synchronized: share one across threads only for concurrent
//! [`apdnn_model_infer`] calls, never while it is being rebound or freed.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use apdnn::engine::{PackedModel, RuntimeModel};
use apdnn::{Error, Precision, Tensor};

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApdnnStatus {
    Ok = 0,
    NullPointer = 1,
    Io = 2,
    Format = 3,
    PrecisionUnavailable = 4,
    Dimension = 5,
    InvalidInput = 6,
    Usage = 7,
    BufferTooSmall = 8,
    Panic = 9,
    Other = 10,
}

/// Opaque model handle.
pub struct ApdnnModel {
    packed: PackedModel,
    runtime: RuntimeModel,
    num_classes: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ApdnnStatus {
    match e {
        Error::Io { .. } => ApdnnStatus::Io,
        Error::Format { .. } | Error::Config(_) => ApdnnStatus::Format,
        Error::PrecisionUnavailable { .. } => ApdnnStatus::PrecisionUnavailable,
        Error::Dimension(_) => ApdnnStatus::Dimension,
        Error::Input(_) => ApdnnStatus::InvalidInput,
        Error::Usage(_) => ApdnnStatus::Usage,
        _ => ApdnnStatus::Other,
    }
}

fn fail(status: ApdnnStatus, msg: impl Into<String>) -> ApdnnStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), ApdnnStatus>) -> ApdnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ApdnnStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(ApdnnStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: apdnn::Result<T>) -> Result<T, ApdnnStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn default_bits(packed: &PackedModel) -> Result<Precision, ApdnnStatus> {
    packed
        .available_bits()
        .into_iter()
        .filter(|b| !b.is_full())
        .max()
        .ok_or_else(|| {
            fail(
                ApdnnStatus::PrecisionUnavailable,
                "model has no integer bit-width",
            )
        })
}

fn into_handle(packed: PackedModel, out: *mut *mut ApdnnModel) -> Result<(), ApdnnStatus> {
    let bits = default_bits(&packed)?;
    let runtime = lift(packed.runtime(bits))?;
    let num_classes = lift(packed.arch.plan())?.num_classes;
    let handle = Box::new(ApdnnModel {
        packed,
        runtime,
        num_classes,
    });
    // SAFETY: the caller checked `out` for null and guarantees it is writable.
    unsafe { *out = Box::into_raw(handle) };
    Ok(())
}

/// Most recent error message on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn apdnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn apdnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a packed model file and binds it to its widest integer bit-width.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_load(
    path: *const c_char,
    out: *mut *mut ApdnnModel,
) -> ApdnnStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return Err(fail(
                ApdnnStatus::NullPointer,
                "path and out must be non-null",
            ));
        }
        let path = unsafe { CStr::from_ptr(path) };
        let path = path
            .to_str()
            .map_err(|_| fail(ApdnnStatus::InvalidInput, "path is not UTF-8"))?;
        let packed = lift(PackedModel::read(Path::new(path)))?;
        into_handle(packed, out)
    })
}

/// Loads a packed model from memory.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut ApdnnModel,
) -> ApdnnStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err(fail(
                ApdnnStatus::NullPointer,
                "data and out must be non-null",
            ));
        }
        let bytes = unsafe { std::slice::from_raw_parts(data, len) };
        let packed = lift(PackedModel::from_bytes(bytes))?;
        into_handle(packed, out)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_free(model: *mut ApdnnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Rebinds the model to `bits` (1..=8). On failure the old binding stays.
///
/// # Safety
/// `model` must be a live handle with no concurrent users.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_set_bits(model: *mut ApdnnModel, bits: u8) -> ApdnnStatus {
    guard(|| {
        let m = unsafe { model.as_mut() }
            .ok_or_else(|| fail(ApdnnStatus::NullPointer, "model is null"))?;
        let p = lift(Precision::from_bits(bits))?;
        m.runtime = lift(m.packed.runtime(p))?;
        Ok(())
    })
}

/// Currently bound bit-width, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_bits(model: *const ApdnnModel) -> u8 {
    unsafe { model.as_ref() }.map_or(0, |m| m.runtime.bits().bits())
}

/// Writes the per-sample input shape `[C, H, W]`.
///
/// # Safety
/// `model` must be a live handle and `shape` point to three writable values.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_input_shape(
    model: *const ApdnnModel,
    shape: *mut usize,
) -> ApdnnStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }
            .ok_or_else(|| fail(ApdnnStatus::NullPointer, "model is null"))?;
        if shape.is_null() {
            return Err(fail(ApdnnStatus::NullPointer, "shape is null"));
        }
        let s = m.packed.arch.input_shape;
        unsafe { ptr::copy_nonoverlapping(s.as_ptr(), shape, 3) };
        Ok(())
    })
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_num_classes(model: *const ApdnnModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.num_classes)
}

/// Lists the bit-widths with BatchNorm statistics (32 is full precision,
/// which a packed model cannot run). `count` always receives the total;
/// the list is written only if it fits in `capacity`.
///
/// # Safety
/// `model` must be a live handle, `bits` hold `capacity` values, `count` be writable.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_available_bits(
    model: *const ApdnnModel,
    bits: *mut u8,
    capacity: usize,
    count: *mut usize,
) -> ApdnnStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }
            .ok_or_else(|| fail(ApdnnStatus::NullPointer, "model is null"))?;
        if count.is_null() || (bits.is_null() && capacity > 0) {
            return Err(fail(ApdnnStatus::NullPointer, "bits or count is null"));
        }
        let list: Vec<u8> = m.packed.available_bits().iter().map(|b| b.bits()).collect();
        unsafe { *count = list.len() };
        if capacity < list.len() {
            return Err(fail(
                ApdnnStatus::BufferTooSmall,
                format!("{} bit-widths do not fit in {capacity}", list.len()),
            ));
        }
        unsafe { ptr::copy_nonoverlapping(list.as_ptr(), bits, list.len()) };
        Ok(())
    })
}

/// Logits for `batch` samples. `input` holds `batch·C·H·W` values in
/// `[0, 1]`, row-major; `logits` receives `batch·classes` values.
///
/// # Safety
/// Buffers must hold the stated lengths; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn apdnn_model_infer(
    model: *const ApdnnModel,
    input: *const f32,
    input_len: usize,
    batch: usize,
    logits: *mut f32,
    logits_len: usize,
) -> ApdnnStatus {
    guard(|| {
        let m = unsafe { model.as_ref() }
            .ok_or_else(|| fail(ApdnnStatus::NullPointer, "model is null"))?;
        if input.is_null() || logits.is_null() {
            return Err(fail(
                ApdnnStatus::NullPointer,
                "input and logits must be non-null",
            ));
        }
        let [c, h, w] = m.packed.arch.input_shape;
        let need = batch * c * h * w;
        if input_len != need {
            return Err(fail(
                ApdnnStatus::Dimension,
                format!("{batch} samples of [{c}, {h}, {w}] need {need} inputs, got {input_len}"),
            ));
        }
        let out_len = batch * m.num_classes;
        if logits_len < out_len {
            return Err(fail(
                ApdnnStatus::BufferTooSmall,
                format!("logits need {out_len} values, buffer holds {logits_len}"),
            ));
        }
        let data = unsafe { std::slice::from_raw_parts(input, input_len) }.to_vec();
        let x = lift(Tensor::new(vec![batch, c, h, w], data))?;
        let y = lift(m.runtime.infer(&x))?;
        unsafe { ptr::copy_nonoverlapping(y.data().as_ptr(), logits, out_len) };
        Ok(())
    })
}
