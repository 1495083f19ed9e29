//! C ABI over `fulm-core`: container I/O, cosine similarity, merging,
//! applying deltas and the Overall metric.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a `FulmStatus`
//! and, on failure, leaves a message retrievable with
//! `fulm_last_error_message` on the same thread. Output pointers are
//! written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fulm_core::eval::{overall, MetricSet};
use fulm_core::{apply_delta, container, cosine, merge, AdapterDelta, Error, ErrorCode, MergeStrategy, ModelParams, TiesConfig};

/// An adapter delta.
pub struct FulmDelta(AdapterDelta);

/// Full model parameters.
pub struct FulmParams(ModelParams);

/// Result codes. Values below 100 mirror the library's error codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FulmStatus {
    Ok = 0,
    EmptyInput = 1,
    ShapeMismatch = 2,
    FactorShape = 3,
    NotRecovered = 4,
    UnknownTensor = 5,
    NonFinite = 6,
    InvalidThreshold = 7,
    InvalidConfig = 8,
    BadMagic = 10,
    UnsupportedVersion = 11,
    ContainerTruncated = 12,
    LengthMismatch = 13,
    MalformedHeader = 14,
    WrongContainerKind = 15,
    Io = 16,
    TaskSpec = 20,
    EmptyBatch = 21,
    TrainingDiverged = 22,
    FrameTruncated = 30,
    BadTag = 31,
    LengthOverflow = 32,
    UnexpectedMessage = 33,
    Timeout = 34,
    RoundAborted = 35,
    UnknownClient = 36,
    RemoteError = 37,
    UnknownExperiment = 40,
    Json = 41,
    NullPointer = 100,
    InvalidUtf8 = 101,
    Panic = 102,
}

impl From<ErrorCode> for FulmStatus {
    fn from(code: ErrorCode) -> Self {
        match code {
            ErrorCode::Ok => Self::Ok,
            ErrorCode::EmptyInput => Self::EmptyInput,
            ErrorCode::ShapeMismatch => Self::ShapeMismatch,
            ErrorCode::FactorShape => Self::FactorShape,
            ErrorCode::NotRecovered => Self::NotRecovered,
            ErrorCode::UnknownTensor => Self::UnknownTensor,
            ErrorCode::NonFinite => Self::NonFinite,
            ErrorCode::InvalidThreshold => Self::InvalidThreshold,
            ErrorCode::InvalidConfig => Self::InvalidConfig,
            ErrorCode::BadMagic => Self::BadMagic,
            ErrorCode::UnsupportedVersion => Self::UnsupportedVersion,
            ErrorCode::ContainerTruncated => Self::ContainerTruncated,
            ErrorCode::LengthMismatch => Self::LengthMismatch,
            ErrorCode::MalformedHeader => Self::MalformedHeader,
            ErrorCode::WrongContainerKind => Self::WrongContainerKind,
            ErrorCode::Io => Self::Io,
            ErrorCode::TaskSpec => Self::TaskSpec,
            ErrorCode::EmptyBatch => Self::EmptyBatch,
            ErrorCode::TrainingDiverged => Self::TrainingDiverged,
            ErrorCode::FrameTruncated => Self::FrameTruncated,
            ErrorCode::BadTag => Self::BadTag,
            ErrorCode::LengthOverflow => Self::LengthOverflow,
            ErrorCode::UnexpectedMessage => Self::UnexpectedMessage,
            ErrorCode::Timeout => Self::Timeout,
            ErrorCode::RoundAborted => Self::RoundAborted,
            ErrorCode::UnknownClient => Self::UnknownClient,
            ErrorCode::RemoteError => Self::RemoteError,
            ErrorCode::UnknownExperiment => Self::UnknownExperiment,
            ErrorCode::Json => Self::Json,
        }
    }
}

/// Merge strategy selector for `fulm_merge`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FulmStrategy {
    Avg = 0,
    Sum = 1,
    Ties = 2,
    Hierarchical = 3,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(FulmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(e.code().into(), e.to_string())
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> FulmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FulmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            FulmStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(FulmStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a str, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map_err(|e| Failure(FulmStatus::InvalidUtf8, format!("path: {e}")))
}

unsafe fn arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fulm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fulm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_delta_load(path: *const c_char, out: *mut *mut FulmDelta) -> FulmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let delta = container::load_delta(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FulmDelta(delta)));
        Ok(())
    })
}

/// # Safety
/// `delta` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fulm_delta_save(delta: *const FulmDelta, path: *const c_char) -> FulmStatus {
    guard(|| {
        let delta = arg(delta, "delta")?;
        container::save_delta(path_arg(path)?, &delta.0)?;
        Ok(())
    })
}

/// # Safety
/// `delta` must come from this library and not be used afterwards. Null is
/// a no-op.
#[no_mangle]
pub unsafe extern "C" fn fulm_delta_free(delta: *mut FulmDelta) {
    if !delta.is_null() {
        drop(Box::from_raw(delta));
    }
}

/// Euclidean norm of the dense-recovered delta.
///
/// # Safety
/// `delta` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_delta_norm(delta: *const FulmDelta, out: *mut f64) -> FulmStatus {
    guard(|| {
        let (delta, out) = (arg(delta, "delta")?, out_arg(out, "out")?);
        *out = delta.0.l2_norm()?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_params_load(path: *const c_char, out: *mut *mut FulmParams) -> FulmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let params = container::load_params(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FulmParams(params)));
        Ok(())
    })
}

/// # Safety
/// `params` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fulm_params_save(params: *const FulmParams, path: *const c_char) -> FulmStatus {
    guard(|| {
        let params = arg(params, "params")?;
        container::save_params(path_arg(path)?, &params.0)?;
        Ok(())
    })
}

/// # Safety
/// `params` must come from this library and not be used afterwards. Null
/// is a no-op.
#[no_mangle]
pub unsafe extern "C" fn fulm_params_free(params: *mut FulmParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Cosine similarity of two deltas (0 when either is zero).
///
/// # Safety
/// `a` and `b` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_cosine(a: *const FulmDelta, b: *const FulmDelta, out: *mut f32) -> FulmStatus {
    guard(|| {
        let (a, b, out) = (arg(a, "a")?, arg(b, "b")?, out_arg(out, "out")?);
        *out = cosine(&a.0, &b.0)?;
        Ok(())
    })
}

/// Merges `count` deltas. `xi` is read only by the hierarchical strategy
/// and `density` only by TIES and hierarchical.
///
/// # Safety
/// `deltas` must point to `count` valid handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_merge(
    deltas: *const *const FulmDelta,
    count: usize,
    strategy: FulmStrategy,
    xi: f32,
    density: f32,
    out: *mut *mut FulmDelta,
) -> FulmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let handles = slice_arg(deltas, count, "deltas")?;
        let inputs = handles
            .iter()
            .map(|&h| arg(h, "delta").map(|d| d.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let strategy = match strategy {
            FulmStrategy::Avg => MergeStrategy::Avg,
            FulmStrategy::Sum => MergeStrategy::Sum,
            FulmStrategy::Ties => MergeStrategy::Ties(TiesConfig::new(density)?),
            FulmStrategy::Hierarchical => MergeStrategy::Hierarchical {
                xi,
                ties: TiesConfig::new(density)?,
            },
        };
        *out = Box::into_raw(Box::new(FulmDelta(merge(&inputs, strategy)?.delta)));
        Ok(())
    })
}

/// `θ' = θ + ∇θ` with LoRA entries recovered at their `alpha / rank`.
///
/// # Safety
/// `base` and `delta` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_apply_delta(
    base: *const FulmParams,
    delta: *const FulmDelta,
    out: *mut *mut FulmParams,
) -> FulmStatus {
    guard(|| {
        let (base, delta, out) = (arg(base, "base")?, arg(delta, "delta")?, out_arg(out, "out")?);
        *out = Box::into_raw(Box::new(FulmParams(apply_delta(&base.0, &delta.0)?)));
        Ok(())
    })
}

/// Mean of the retention values and the reversed (`1 − m`) unlearning
/// values, all fractions in `[0, 1]`.
///
/// # Safety
/// `retain` and `unlearn` must point to the given number of values (may be
/// null when the count is 0); `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fulm_overall(
    retain: *const f64,
    n_retain: usize,
    unlearn: *const f64,
    n_unlearn: usize,
    out: *mut f64,
) -> FulmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut m = MetricSet::new();
        for (i, &v) in slice_arg(retain, n_retain, "retain")?.iter().enumerate() {
            m = m.with_retain(format!("r{i}"), v);
        }
        for (i, &v) in slice_arg(unlearn, n_unlearn, "unlearn")?.iter().enumerate() {
            m = m.with_unlearn(format!("u{i}"), v);
        }
        *out = overall(&m)?;
        Ok(())
    })
}
