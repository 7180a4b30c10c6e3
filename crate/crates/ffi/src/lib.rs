//! C ABI over `panda-core`.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every fallible call returns a
//! [`PandaStatus`]; on failure the message is kept per thread and can be
//! read with [`panda_last_error_length`] and [`panda_last_error_message`].
//! Arrays are row-major `f64`, channels first.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::Array2;
use panda_core::eval::{gp_correlation_dimension, GpConfig};
use panda_core::integrate::{integrate, GuardOutcome, IntegrationConfig};
use panda_core::model::Checkpoint;
use panda_core::systems::{founder, list_founders};
use panda_core::trajectory::Trajectory;
use panda_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PandaStatus {
    Ok = 0,
    /// Null pointer, bad shape, non-UTF-8 string or similar caller error.
    InvalidArgument = 1,
    /// A non-finite value was produced or supplied.
    Numeric = 2,
    /// A file or buffer is malformed.
    Format = 3,
    UnsupportedVersion = 4,
    Config = 5,
    MissingArtifact = 6,
    Io = 7,
    InsufficientData = 8,
    /// The integrator stopped before the end of the requested span.
    IntegrationFailed = 9,
    /// The output buffer is too small; nothing was written.
    BufferTooSmall = 10,
    /// A Rust panic was caught at the boundary.
    Panic = 11,
    Other = 12,
}

/// Shape of a model loaded from a checkpoint.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PandaModelInfo {
    pub patch_size: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_params: usize,
    pub channel_attention: bool,
}

/// Opaque handle to a loaded checkpoint.
pub struct PandaCheckpoint {
    inner: Checkpoint,
}

/// Opaque handle to a sampled trajectory.
pub struct PandaTrajectory {
    inner: Trajectory,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> PandaStatus {
    match e {
        Error::InvalidInput(_) | Error::UnsupportedConfig(_) => PandaStatus::InvalidArgument,
        Error::Numeric { .. } | Error::Diverged { .. } => PandaStatus::Numeric,
        Error::Format { .. } | Error::Json(_) => PandaStatus::Format,
        Error::UnsupportedVersion { .. } => PandaStatus::UnsupportedVersion,
        Error::Config { .. } => PandaStatus::Config,
        Error::MissingArtifact(_) => PandaStatus::MissingArtifact,
        Error::Io(_) => PandaStatus::Io,
        Error::InsufficientData(_) => PandaStatus::InsufficientData,
        Error::DegenerateFlow(_) | Error::Unsampleable(_) => PandaStatus::Other,
    }
}

struct Fail(PandaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PandaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic in the thread-local slot.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PandaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            PandaStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            PandaStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{what} is null")))
}

unsafe fn matrix_arg(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>, Fail> {
    if p.is_null() || rows == 0 || cols == 0 {
        return Err(invalid(format!("{what} must be a non-empty array")));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| invalid(format!("{what} shape overflows")))?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

unsafe fn write_out(out: *mut f64, out_len: usize, values: &Array2<f64>) -> Result<(), Fail> {
    if values.len() > out_len {
        return Err(Fail(
            PandaStatus::BufferTooSmall,
            format!("output needs {} values, buffer holds {out_len}", values.len()),
        ));
    }
    if out.is_null() {
        return Err(invalid("output buffer is null"));
    }
    let dst = std::slice::from_raw_parts_mut(out, values.len());
    for (d, s) in dst.iter_mut().zip(values.iter()) {
        *d = *s;
    }
    Ok(())
}

/// Copies `s` plus a NUL into `buf`, storing the full length (without NUL)
/// in `needed` when it is non-null.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Result<(), Fail> {
    if !needed.is_null() {
        *needed = s.len();
    }
    if buf.is_null() && len == 0 {
        return Ok(());
    }
    if len < s.len() + 1 {
        return Err(Fail(PandaStatus::BufferTooSmall, format!("string needs {} bytes", s.len() + 1)));
    }
    std::ptr::copy_nonoverlapping(s.as_ptr(), buf as *mut u8, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

// ---------------------------------------------------------------- errors

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn panda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Length in bytes of the last error message on this thread, excluding the
/// terminating NUL. Zero after a successful call.
#[no_mangle]
pub extern "C" fn panda_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (NUL-terminated, truncated to
/// fit). Returns the number of bytes written excluding the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn panda_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let mut n = e.len().min(len - 1);
        while !e.is_char_boundary(n) {
            n -= 1;
        }
        std::ptr::copy_nonoverlapping(e.as_ptr(), buf as *mut u8, n);
        *buf.add(n) = 0;
        n
    })
}

// ---------------------------------------------------------------- checkpoints

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn panda_checkpoint_load(path: *const c_char, out: *mut *mut PandaCheckpoint) -> PandaStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let p = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(PandaCheckpoint { inner: ck }));
        Ok(())
    })
}

/// Parses a checkpoint from an in-memory buffer.
///
/// # Safety
/// `bytes` must be valid for `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn panda_checkpoint_from_bytes(
    bytes: *const u8,
    len: usize,
    out: *mut *mut PandaCheckpoint,
) -> PandaStatus {
    guard(|| {
        if out.is_null() || bytes.is_null() {
            return Err(invalid("null argument"));
        }
        let ck = Checkpoint::from_bytes(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(PandaCheckpoint { inner: ck }));
        Ok(())
    })
}

/// Frees a checkpoint. Null is a no-op.
///
/// # Safety
/// `ck` must come from a `panda_checkpoint_*` constructor and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn panda_checkpoint_free(ck: *mut PandaCheckpoint) {
    if !ck.is_null() {
        drop(Box::from_raw(ck));
    }
}

/// # Safety
/// `ck` must be a live handle; `info` must be writable.
#[no_mangle]
pub unsafe extern "C" fn panda_checkpoint_info(ck: *const PandaCheckpoint, info: *mut PandaModelInfo) -> PandaStatus {
    guard(|| {
        let ck = ref_arg(ck, "checkpoint")?;
        if info.is_null() {
            return Err(invalid("info is null"));
        }
        let c = &ck.inner.model.config;
        *info = PandaModelInfo {
            patch_size: c.patch_size,
            horizon: c.horizon,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            n_params: ck.inner.model.n_params(),
            channel_attention: c.use_channel_attn,
        };
        Ok(())
    })
}

/// Reads a metadata value. Pass a null `buf` with `len` 0 to query the
/// length through `needed`.
///
/// # Safety
/// `ck` must be live, `key` NUL-terminated, `buf` valid for `len` bytes or
/// null, `needed` writable or null.
#[no_mangle]
pub unsafe extern "C" fn panda_checkpoint_metadata(
    ck: *const PandaCheckpoint,
    key: *const c_char,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> PandaStatus {
    guard(|| {
        let ck = ref_arg(ck, "checkpoint")?;
        let key = str_arg(key, "key")?;
        let v = ck
            .inner
            .metadata
            .get(key)
            .ok_or_else(|| invalid(format!("no metadata key `{key}`")))?;
        write_str(v, buf, len, needed)
    })
}

/// Forecasts `horizon` steps for a context of `n_channels` × `n_time`
/// values. `out` receives `n_channels` × `horizon` values.
///
/// # Safety
/// `context` must hold `n_channels * n_time` values and `out` `out_len`.
#[no_mangle]
pub unsafe extern "C" fn panda_forecast(
    ck: *const PandaCheckpoint,
    context: *const f64,
    n_channels: usize,
    n_time: usize,
    out: *mut f64,
    out_len: usize,
) -> PandaStatus {
    guard(|| {
        let ck = ref_arg(ck, "checkpoint")?;
        let ctx = matrix_arg(context, n_channels, n_time, "context")?;
        let f = ck.inner.model.forecast(&ctx)?;
        write_out(out, out_len, &f)
    })
}

/// Reconstructs masked patches. `mask` holds `n_channels` ×
/// (`n_time` / patch size) bytes, nonzero meaning masked; `out` receives
/// `n_channels` × `n_time` values.
///
/// # Safety
/// Buffers must have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn panda_infill(
    ck: *const PandaCheckpoint,
    context: *const f64,
    n_channels: usize,
    n_time: usize,
    mask: *const u8,
    out: *mut f64,
    out_len: usize,
) -> PandaStatus {
    guard(|| {
        let ck = ref_arg(ck, "checkpoint")?;
        let ctx = matrix_arg(context, n_channels, n_time, "context")?;
        let p = ck.inner.model.config.patch_size;
        if n_time % p != 0 {
            return Err(invalid(format!("n_time {n_time} is not a multiple of the patch size {p}")));
        }
        if mask.is_null() {
            return Err(invalid("mask is null"));
        }
        let n = n_time / p;
        let m = std::slice::from_raw_parts(mask, n_channels * n);
        let mask = Array2::from_shape_fn((n_channels, n), |(c, k)| m[c * n + k] != 0);
        let y = ck.inner.model.mlm_infill(&ctx, &mask)?;
        write_out(out, out_len, &y)
    })
}

// ---------------------------------------------------------------- systems

/// Number of built-in founder systems.
#[no_mangle]
pub extern "C" fn panda_founder_count() -> usize {
    list_founders().len()
}

/// Name of founder `index`, copied into `buf` as with
/// [`panda_checkpoint_metadata`].
///
/// # Safety
/// `buf` valid for `len` bytes or null; `needed` writable or null.
#[no_mangle]
pub unsafe extern "C" fn panda_founder_name(index: usize, buf: *mut c_char, len: usize, needed: *mut usize) -> PandaStatus {
    guard(|| {
        let all = list_founders();
        let s = all.get(index).ok_or_else(|| invalid(format!("founder index {index} out of range")))?;
        write_str(&s.id, buf, len, needed)
    })
}

/// Integrates a founder system from its default initial condition over
/// `n_points` samples at its native step.
///
/// # Safety
/// `name` NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn panda_founder_trajectory(
    name: *const c_char,
    n_points: usize,
    out: *mut *mut PandaTrajectory,
) -> PandaStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let name = str_arg(name, "name")?;
        let spec = founder(name).ok_or_else(|| invalid(format!("unknown founder `{name}`")))?;
        if n_points < 2 {
            return Err(invalid("n_points must be at least 2"));
        }
        let cfg = IntegrationConfig {
            n_points,
            t_span: (0.0, spec.dt * (n_points - 1) as f64),
            ..IntegrationConfig::standard(&spec)
        };
        let (tr, rep) = integrate(&spec, &spec.default_ic, &cfg)?;
        if rep.outcome != GuardOutcome::Completed {
            return Err(Fail(PandaStatus::IntegrationFailed, format!("{:?}: {}", rep.outcome, rep.detail)));
        }
        *out = Box::into_raw(Box::new(PandaTrajectory { inner: tr }));
        Ok(())
    })
}

/// Frees a trajectory. Null is a no-op.
///
/// # Safety
/// `tr` must come from a `panda_*_trajectory` constructor.
#[no_mangle]
pub unsafe extern "C" fn panda_trajectory_free(tr: *mut PandaTrajectory) {
    if !tr.is_null() {
        drop(Box::from_raw(tr));
    }
}

/// # Safety
/// `tr` must be live; the out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn panda_trajectory_shape(
    tr: *const PandaTrajectory,
    n_channels: *mut usize,
    n_time: *mut usize,
) -> PandaStatus {
    guard(|| {
        let tr = ref_arg(tr, "trajectory")?;
        if n_channels.is_null() || n_time.is_null() {
            return Err(invalid("null output"));
        }
        *n_channels = tr.inner.channels();
        *n_time = tr.inner.len();
        Ok(())
    })
}

/// Copies the trajectory values (channels × time) into `out`.
///
/// # Safety
/// `out` valid for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn panda_trajectory_values(tr: *const PandaTrajectory, out: *mut f64, out_len: usize) -> PandaStatus {
    guard(|| {
        let tr = ref_arg(tr, "trajectory")?;
        write_out(out, out_len, &tr.inner.values)
    })
}

// ---------------------------------------------------------------- analysis

/// Grassberger-Procaccia correlation dimension with default settings.
///
/// # Safety
/// `values` must hold `n_channels * n_time` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn panda_correlation_dimension(
    values: *const f64,
    n_channels: usize,
    n_time: usize,
    out: *mut f64,
) -> PandaStatus {
    guard(|| {
        let x = matrix_arg(values, n_channels, n_time, "values")?;
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        *out = gp_correlation_dimension(&x, &GpConfig::default())?;
        Ok(())
    })
}
