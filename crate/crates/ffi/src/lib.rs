//! C ABI over `sinc-core`.
//!
//! Every function returns a [`SincStatus`]; on failure the message is kept
//! per thread and read with [`sinc_last_error`]. Models are opaque handles
//! created by `sinc_model_init` or `sinc_model_load` and released with
//! `sinc_model_free`. Buffers are caller-owned; output lengths are checked.
//! Panics are caught at the boundary and reported as `SINC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use sinc_core::{
    eval, losses, model, spectral, Bandlimits, Clip, ClipDims, LossWeights, ModelConfig,
    ModelParams, SincError, SpectralConfig,
};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SincStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    InvalidBand = 3,
    Config = 4,
    InvalidState = 5,
    Numeric = 6,
    Format = 7,
    Io = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Signal band `[a, b]` in Hz and sparsity half-width `delta_f`.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SincBand {
    pub a: f64,
    pub b: f64,
    pub delta_f: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct SincLossWeights {
    pub bandwidth: f64,
    pub sparsity: f64,
    pub variance: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct SincLoss {
    pub bandwidth: f64,
    pub sparsity: f64,
    pub variance: f64,
    pub total: f64,
}

/// Opaque model handle.
pub struct SincModel {
    params: ModelParams,
}

struct Failure(SincStatus, String);

impl From<SincError> for Failure {
    fn from(e: SincError) -> Self {
        let status = match &e {
            SincError::InvalidInput(_) => SincStatus::InvalidInput,
            SincError::InvalidBand(_) => SincStatus::InvalidBand,
            SincError::Config(_) => SincStatus::Config,
            SincError::InvalidState(_) => SincStatus::InvalidState,
            SincError::Numeric(_) => SincStatus::Numeric,
            SincError::Format { .. } => SincStatus::Format,
            SincError::Io { .. } => SincStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SincStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SincStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(format!("panic: {msg}"));
            SincStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SincStatus::NullPointer, format!("{what} is null"))
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for `len` writes.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// # Safety
/// `ptr` must be null or valid for one write.
unsafe fn out<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    ptr.as_mut().ok_or_else(|| null(what))
}

/// # Safety
/// `ptr` must be null or a nul-terminated string.
unsafe fn path(ptr: *const c_char) -> Result<PathBuf, Failure> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Failure(SincStatus::InvalidInput, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// # Safety
/// `ptr` must be null or a handle from this library that has not been freed.
unsafe fn model_ref<'a>(ptr: *const SincModel) -> Result<&'a SincModel, Failure> {
    ptr.as_ref().ok_or_else(|| null("model"))
}

fn band(b: SincBand) -> Result<Bandlimits, Failure> {
    Ok(Bandlimits::new(b.a, b.b, b.delta_f)?)
}

fn room(needed: usize, have: usize) -> Result<(), Failure> {
    if have < needed {
        return Err(Failure(
            SincStatus::BufferTooSmall,
            format!("output buffer holds {have} values, {needed} needed"),
        ));
    }
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sinc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Number of one-sided PSD bins for `nfft`, `nfft / 2 + 1`.
#[no_mangle]
pub extern "C" fn sinc_psd_len(nfft: usize) -> usize {
    nfft / 2 + 1
}

/// One-sided power spectrum of the mean-subtracted signal `y`.
///
/// # Safety
/// `y` must hold `n` values and `out` room for `out_len`.
#[no_mangle]
pub unsafe extern "C" fn sinc_psd(
    y: *const f64,
    n: usize,
    fs: f64,
    nfft: usize,
    out: *mut f64,
    out_len: usize,
) -> SincStatus {
    guard(|| {
        let y = slice(y, n, "y")?;
        let cfg = SpectralConfig::new(nfft, fs)?;
        let spec = spectral::psd(y, &cfg)?;
        room(spec.power().len(), out_len)?;
        slice_mut(out, out_len, "out")?[..spec.power().len()].copy_from_slice(spec.power());
        Ok(())
    })
}

/// Rate (per minute) of the in-band PSD peak of `y`.
///
/// # Safety
/// `y` must hold `n` values; `rate` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sinc_peak_rate(
    y: *const f64,
    n: usize,
    fs: f64,
    nfft: usize,
    band_limits: SincBand,
    rate: *mut f64,
) -> SincStatus {
    guard(|| {
        let y = slice(y, n, "y")?;
        let cfg = SpectralConfig::new(nfft, fs)?;
        *out(rate, "rate")? = spectral::peak_rate(y, &band(band_limits)?, &cfg)?;
        Ok(())
    })
}

/// Weighted loss of a batch of `n_signals` signals of `len` samples stored
/// row by row. When `grad` is not null it receives the gradient of the total
/// with respect to every sample, in the same layout.
///
/// # Safety
/// `batch` must hold `n_signals * len` values, `grad` (if not null) room for
/// as many, and `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sinc_loss(
    batch: *const f64,
    n_signals: usize,
    len: usize,
    fs: f64,
    nfft: usize,
    band_limits: SincBand,
    weights: SincLossWeights,
    loss: *mut SincLoss,
    grad: *mut f64,
) -> SincStatus {
    guard(|| {
        let total_len = n_signals
            .checked_mul(len)
            .ok_or_else(|| Failure(SincStatus::InvalidInput, "batch size overflows".into()))?;
        let data = slice(batch, total_len, "batch")?;
        if len == 0 {
            return Err(Failure(
                SincStatus::InvalidInput,
                "signals must be non-empty".into(),
            ));
        }
        let signals: Vec<Vec<f64>> = data.chunks(len).map(<[f64]>::to_vec).collect();
        let cfg = SpectralConfig::new(nfft, fs)?;
        let w = LossWeights {
            bandwidth: weights.bandwidth,
            sparsity: weights.sparsity,
            variance: weights.variance,
        };
        let (breakdown, grads) = losses::total_loss(&signals, &band(band_limits)?, &cfg, &w)?;
        let dst = out(loss, "loss")?;
        *dst = SincLoss {
            bandwidth: breakdown.bandwidth,
            sparsity: breakdown.sparsity,
            variance: breakdown.variance,
            total: breakdown.total,
        };
        if !grad.is_null() {
            let g = slice_mut(grad, total_len, "grad")?;
            for (row, src) in g.chunks_mut(len).zip(&grads) {
                row.copy_from_slice(src);
            }
        }
        Ok(())
    })
}

/// A freshly initialised default model for `width x height x channels` clips.
///
/// # Safety
/// `model_out` must be writable; the handle is released with `sinc_model_free`.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_init(
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
    model_out: *mut *mut SincModel,
) -> SincStatus {
    guard(|| {
        let dst = out(model_out, "model_out")?;
        let params = model::init_model(&ModelConfig::default_for(width, height, channels, seed))?;
        *dst = Box::into_raw(Box::new(SincModel { params }));
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `file` must be a nul-terminated UTF-8 path and `model_out` writable.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_load(
    file: *const c_char,
    model_out: *mut *mut SincModel,
) -> SincStatus {
    guard(|| {
        let dst = out(model_out, "model_out")?;
        let params = ModelParams::load(&path(file)?)?;
        *dst = Box::into_raw(Box::new(SincModel { params }));
        Ok(())
    })
}

/// Writes a model checkpoint.
///
/// # Safety
/// `model` must be a live handle and `file` a nul-terminated UTF-8 path.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_save(
    model: *const SincModel,
    file: *const c_char,
) -> SincStatus {
    guard(|| {
        let m = model_ref(model)?;
        m.params.save(&path(file)?)?;
        Ok(())
    })
}

/// Releases a model handle; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle, which is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_free(model: *mut SincModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

/// Clip dimensions `(width, height, channels)` and parameter count of a model.
///
/// # Safety
/// `model` must be a live handle; each output pointer may be null.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_shape(
    model: *const SincModel,
    width: *mut usize,
    height: *mut usize,
    channels: *mut usize,
    n_params: *mut usize,
) -> SincStatus {
    guard(|| {
        let m = model_ref(model)?;
        let (w, h, c) = m.params.config().spatial_dims;
        for (p, v) in [
            (width, w),
            (height, h),
            (channels, c),
            (n_params, m.params.values().len()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `frames` must hold `n_frames` frames of the model's frame size.
unsafe fn clip_from(
    m: &SincModel,
    frames: *const f32,
    n_frames: usize,
    fps: f64,
) -> Result<Clip, Failure> {
    let (w, h, c) = m.params.config().spatial_dims;
    let dims = ClipDims {
        frames: n_frames,
        width: w,
        height: h,
        channels: c,
    };
    let len = dims.len();
    let data = slice(frames, len, "frames")?.to_vec();
    Ok(Clip::unlabeled(dims, fps, data)?)
}

/// Waveform of a clip. Frames are stored one after another; within a frame
/// the layout is width-major, then height, then channel.
///
/// # Safety
/// `frames` must hold `n_frames * width * height * channels` values and `out`
/// room for `out_len >= n_frames`.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_forward(
    model: *const SincModel,
    frames: *const f32,
    n_frames: usize,
    fps: f64,
    out_wave: *mut f64,
    out_len: usize,
) -> SincStatus {
    guard(|| {
        let m = model_ref(model)?;
        let clip = clip_from(m, frames, n_frames, fps)?;
        room(n_frames, out_len)?;
        let (y, _) = model::forward(&m.params, &clip)?;
        slice_mut(out_wave, out_len, "out")?[..n_frames].copy_from_slice(&y);
        Ok(())
    })
}

/// Rates (per minute) of `clip_len`-frame windows at `stride`, with their
/// centre times in seconds. `count` always receives the number of windows;
/// when that exceeds `capacity` no rates are written and the call fails with
/// `SINC_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `frames` as for `sinc_model_forward`; `times` and `rates` must have room
/// for `capacity` values; `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sinc_model_predict_rates(
    model: *const SincModel,
    frames: *const f32,
    n_frames: usize,
    fps: f64,
    clip_len: usize,
    stride: usize,
    nfft: usize,
    band_limits: SincBand,
    times: *mut f64,
    rates: *mut f64,
    capacity: usize,
    count: *mut usize,
) -> SincStatus {
    guard(|| {
        let m = model_ref(model)?;
        let n_out = out(count, "count")?;
        let clip = clip_from(m, frames, n_frames, fps)?;
        let cfg = SpectralConfig::new(nfft, fps)?;
        let series = eval::predict_rates(
            &m.params,
            &clip,
            clip_len,
            stride,
            &band(band_limits)?,
            &cfg,
        )?;
        *n_out = series.len();
        room(series.len(), capacity)?;
        slice_mut(times, capacity, "times")?[..series.len()].copy_from_slice(series.times());
        slice_mut(rates, capacity, "rates")?[..series.len()].copy_from_slice(series.rates());
        Ok(())
    })
}
