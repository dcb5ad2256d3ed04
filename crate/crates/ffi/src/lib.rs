//! C ABI over the flowgest library.
//!
//! Every fallible function returns an [`FgStatus`]; on failure a message is
//! available from [`fg_last_error`] on the same thread. Buffers are owned by
//! the caller and their lengths are stated per function. Models are opaque
//! handles released with [`fg_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use flowgest::encode::{quantize_direction, quantize_magnitude, direction_of};
use flowgest::eval::{vote, EvalError};
use flowgest::flow::{estimate_flow_planes, FarnebackParams, FlowError};
use flowgest::net::checkpoint::load_checkpoint;
use flowgest::net::{cross_modality_init, NetError, ResNet, Tensor4};
use flowgest::raster::Plane;

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Compute = 5,
    Panic = 6,
}

/// Dense-flow parameters; obtain defaults from [`fg_flow_params_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FgFlowParams {
    pub pyramid_scale: f64,
    pub levels: u32,
    pub window_size: u32,
    pub iterations: u32,
    pub poly_n: u32,
    pub poly_sigma: f64,
}

impl From<FarnebackParams> for FgFlowParams {
    fn from(p: FarnebackParams) -> Self {
        Self {
            pyramid_scale: p.pyramid_scale,
            levels: p.levels as u32,
            window_size: p.window_size as u32,
            iterations: p.iterations as u32,
            poly_n: p.poly_n as u32,
            poly_sigma: p.poly_sigma,
        }
    }
}

impl From<FgFlowParams> for FarnebackParams {
    fn from(p: FgFlowParams) -> Self {
        Self {
            pyramid_scale: p.pyramid_scale,
            levels: p.levels as usize,
            window_size: p.window_size as usize,
            iterations: p.iterations as usize,
            poly_n: p.poly_n as usize,
            poly_sigma: p.poly_sigma,
        }
    }
}

/// A loaded classifier.
pub struct FgModel {
    net: ResNet<f32>,
}

struct Failure {
    status: FgStatus,
    message: String,
}

impl Failure {
    fn new(status: FgStatus, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let status = match e {
            NetError::Io(_) => FgStatus::Io,
            NetError::Checkpoint(_) => FgStatus::Format,
            NetError::Shape { .. } | NetError::Config(_) => FgStatus::InvalidArgument,
            _ => FgStatus::Compute,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<FlowError> for Failure {
    fn from(e: FlowError) -> Self {
        let status = match e {
            FlowError::Params(_) | FlowError::DimensionMismatch(..) => FgStatus::InvalidArgument,
            _ => FgStatus::Compute,
        };
        Failure::new(status, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::new(FgStatus::InvalidArgument, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FgStatus::Ok
        }
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal panic: {msg}"));
            FgStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(FgStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn area(width: usize, height: usize) -> Result<usize, Failure> {
    match width.checked_mul(height) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(Failure::new(
            FgStatus::InvalidArgument,
            format!("invalid size {width}x{height}"),
        )),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn fg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn fg_flow_params_default() -> FgFlowParams {
    FarnebackParams::default().into()
}

/// Dense flow between two 8-bit grayscale frames of `width * height` bytes.
/// Writes `width * height` values to each of `out_u` and `out_v`.
/// `params` may be null for the defaults.
///
/// # Safety
/// All non-null pointers must reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn fg_flow_estimate(
    prev: *const u8,
    next: *const u8,
    width: usize,
    height: usize,
    params: *const FgFlowParams,
    out_u: *mut f32,
    out_v: *mut f32,
) -> FgStatus {
    guard(|| {
        non_null(prev, "prev")?;
        non_null(next, "next")?;
        non_null(out_u, "out_u")?;
        non_null(out_v, "out_v")?;
        let n = area(width, height)?;
        let params: FarnebackParams = if params.is_null() {
            FarnebackParams::default()
        } else {
            (*params).into()
        };
        let load = |p: *const u8| Plane::from_vec(width, height, std::slice::from_raw_parts(p, n).to_vec()).to_f32();
        let field = estimate_flow_planes(&load(prev), &load(next), &params)?;
        std::slice::from_raw_parts_mut(out_u, n).copy_from_slice(&field.u);
        std::slice::from_raw_parts_mut(out_v, n).copy_from_slice(&field.v);
        Ok(())
    })
}

/// Quantize `len` flow vectors to 8-bit magnitude (capped at `mag_cap`) and
/// direction codes.
///
/// # Safety
/// All pointers must reference buffers of `len` elements.
#[no_mangle]
pub unsafe extern "C" fn fg_quantize(
    u: *const f32,
    v: *const f32,
    len: usize,
    mag_cap: f32,
    out_mag: *mut u8,
    out_dir: *mut u8,
) -> FgStatus {
    guard(|| {
        non_null(u, "u")?;
        non_null(v, "v")?;
        non_null(out_mag, "out_mag")?;
        non_null(out_dir, "out_dir")?;
        if !(mag_cap > 0.0 && mag_cap.is_finite()) {
            return Err(Failure::new(FgStatus::InvalidArgument, format!("mag_cap {mag_cap} must be positive")));
        }
        let (u, v) = (std::slice::from_raw_parts(u, len), std::slice::from_raw_parts(v, len));
        let mag = std::slice::from_raw_parts_mut(out_mag, len);
        let dir = std::slice::from_raw_parts_mut(out_dir, len);
        for k in 0..len {
            let m = (u[k] as f64).hypot(v[k] as f64) as f32;
            mag[k] = quantize_magnitude(m, mag_cap);
            dir[k] = quantize_direction(direction_of(u[k], v[k]));
        }
        Ok(())
    })
}

/// Average an RGB first-layer kernel `[out_channels, 3, kh, kw]` over its
/// input channels and replicate it to `[out_channels, target_channels, kh, kw]`.
///
/// # Safety
/// `rgb` holds `out_channels * 3 * kh * kw` floats and `out` has room for
/// `out_channels * target_channels * kh * kw`.
#[no_mangle]
pub unsafe extern "C" fn fg_cross_modality_init(
    rgb: *const f32,
    out_channels: usize,
    kh: usize,
    kw: usize,
    target_channels: usize,
    out: *mut f32,
) -> FgStatus {
    guard(|| {
        non_null(rgb, "rgb")?;
        non_null(out, "out")?;
        if out_channels == 0 || kh == 0 || kw == 0 || target_channels == 0 {
            return Err(Failure::new(FgStatus::InvalidArgument, "dimensions must be positive"));
        }
        let n = out_channels * 3 * kh * kw;
        let src = Tensor4::from_vec([out_channels, 3, kh, kw], std::slice::from_raw_parts(rgb, n).to_vec());
        let init = cross_modality_init(&src, target_channels)?;
        std::slice::from_raw_parts_mut(out, init.data().len()).copy_from_slice(init.data());
        Ok(())
    })
}

/// Load a checkpoint; on success `*out_model` owns a new handle.
///
/// # Safety
/// `path` is a NUL-terminated UTF-8 string and `out_model` is writable.
#[no_mangle]
pub unsafe extern "C" fn fg_model_load(path: *const c_char, out_model: *mut *mut FgModel) -> FgStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out_model, "out_model")?;
        *out_model = std::ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure::new(FgStatus::InvalidArgument, "path is not UTF-8"))?;
        let net = load_checkpoint(Path::new(path))?.to_model()?;
        *out_model = Box::into_raw(Box::new(FgModel { net }));
        Ok(())
    })
}

/// Release a model handle; null is ignored.
///
/// # Safety
/// `model` came from [`fg_model_load`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fg_model_free(model: *mut FgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_model_num_classes(model: *const FgModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config.num_classes)
}

/// Number of input channels, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fg_model_input_channels(model: *const FgModel) -> usize {
    model.as_ref().map_or(0, |m| m.net.config.input_channels)
}

/// Class probabilities for one chunk laid out `[channels, height, width]`.
/// `out_probs` must hold [`fg_model_num_classes`] doubles.
///
/// # Safety
/// `model` is a live handle, `chunk` holds `channels * height * width`
/// floats and `out_probs` is large enough.
#[no_mangle]
pub unsafe extern "C" fn fg_model_predict(
    model: *mut FgModel,
    chunk: *const f32,
    height: usize,
    width: usize,
    out_probs: *mut f64,
) -> FgStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(chunk, "chunk")?;
        non_null(out_probs, "out_probs")?;
        let m = &mut *model;
        let n = area(width, height)? * m.net.config.input_channels;
        let probs = m.net.predict_chunk(std::slice::from_raw_parts(chunk, n), height, width)?;
        std::slice::from_raw_parts_mut(out_probs, probs.len()).copy_from_slice(&probs);
        Ok(())
    })
}

/// Clip-level vote over `chunks` probability rows of `classes` entries
/// (row-major): argmax of the mean, ties to the lowest class index. Rows
/// must have one entry per gesture class (15) and sum to 1.
///
/// # Safety
/// `probs` holds `chunks * classes` doubles; `out_label` is writable.
#[no_mangle]
pub unsafe extern "C" fn fg_vote(probs: *const f64, chunks: usize, classes: usize, out_label: *mut u32) -> FgStatus {
    guard(|| {
        non_null(probs, "probs")?;
        non_null(out_label, "out_label")?;
        let n = chunks
            .checked_mul(classes)
            .ok_or_else(|| Failure::new(FgStatus::InvalidArgument, "size overflow"))?;
        let rows: Vec<Vec<f64>> = if classes == 0 {
            vec![Vec::new(); chunks]
        } else {
            std::slice::from_raw_parts(probs, n).chunks(classes).map(<[f64]>::to_vec).collect()
        };
        *out_label = vote(&rows)? as u32;
        Ok(())
    })
}
