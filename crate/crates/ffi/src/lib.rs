//! C ABI over the `autofed` library.
//!
//! Every fallible call returns an [`AutofedStatus`]; on failure the message
//! is available from [`autofed_last_error`] on the same thread until the
//! next failing call. Handles are opaque and must be released with their
//! matching `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;
use std::slice;

use autofed::config::RunConfig;
use autofed::experiment;
use autofed::metrics::{evaluate_slices, MetricsReport};
use autofed::params::Snapshot;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AutofedStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    RuntimeError = 4,
    /// Output buffer too small; the required size was still written.
    BufferTooSmall = 5,
    NotFound = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AutofedMetrics {
    pub mae: f64,
    pub rmse: f64,
    pub mse: f64,
    pub mape_percent: f64,
    pub masked_fraction: f64,
}

impl From<MetricsReport> for AutofedMetrics {
    fn from(m: MetricsReport) -> Self {
        Self {
            mae: m.mae,
            rmse: m.rmse,
            mse: m.mse,
            mape_percent: m.mape_percent,
            masked_fraction: m.masked_fraction,
        }
    }
}

/// Parsed and validated run configuration.
pub struct AutofedConfig(RunConfig);

/// Results of a finished run.
pub struct AutofedRun {
    report: CString,
    clients: Vec<(usize, usize, Option<MetricsReport>)>,
}

/// Decoded parameter snapshot.
pub struct AutofedSnapshot {
    inner: Snapshot,
    names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl ToString) {
    let text = msg.to_string().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn fail(status: AutofedStatus, msg: impl ToString) -> AutofedStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> AutofedStatus) -> AutofedStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(AutofedStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, AutofedStatus> {
    if p.is_null() {
        return Err(fail(AutofedStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AutofedStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn put_handle<T>(out: *mut *mut T, value: T) {
    // SAFETY: callers check `out` for null first.
    unsafe { *out = Box::into_raw(Box::new(value)) };
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn autofed_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn autofed_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a TOML run config from `path`. Relative data paths resolve against
/// the file's directory and `AUTOFED_SEED` fills a missing seed.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_config_load(path: *const c_char, out: *mut *mut AutofedConfig) -> AutofedStatus {
    guard(|| {
        if out.is_null() {
            return fail(AutofedStatus::NullPointer, "out is null");
        }
        let path = match str_arg(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        match RunConfig::load(Path::new(path)) {
            Ok(c) => {
                put_handle(out, AutofedConfig(c));
                AutofedStatus::Ok
            }
            Err(e) => fail(AutofedStatus::ConfigError, e),
        }
    })
}

/// Parses config text. Relative paths resolve against `base_dir` (the
/// current directory when null). The environment seed is not consulted.
///
/// # Safety
/// `text` and a non-null `base_dir` must be NUL-terminated; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_config_parse(
    text: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut AutofedConfig,
) -> AutofedStatus {
    guard(|| {
        if out.is_null() {
            return fail(AutofedStatus::NullPointer, "out is null");
        }
        let text = match str_arg(text, "text") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let base = if base_dir.is_null() {
            "."
        } else {
            match str_arg(base_dir, "base_dir") {
                Ok(b) => b,
                Err(s) => return s,
            }
        };
        match RunConfig::parse(text, Path::new("<ffi>"), Path::new(base), None) {
            Ok(c) => {
                put_handle(out, AutofedConfig(c));
                AutofedStatus::Ok
            }
            Err(e) => fail(AutofedStatus::ConfigError, e),
        }
    })
}

/// # Safety
/// `config` must be null or a handle from `autofed_config_*` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autofed_config_free(config: *mut AutofedConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs training and evaluation, writing the report and checkpoints to the
/// config's output directory.
///
/// # Safety
/// `config` must be a live config handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_run(config: *const AutofedConfig, out: *mut *mut AutofedRun) -> AutofedStatus {
    guard(|| {
        if config.is_null() || out.is_null() {
            return fail(AutofedStatus::NullPointer, "config or out is null");
        }
        match experiment::run(&(*config).0) {
            Ok(outcome) => {
                let report = CString::new(outcome.report.to_string_lossy().into_owned()).unwrap_or_default();
                let clients = outcome.clients.iter().map(|c| (c.client, c.nodes, c.test)).collect();
                put_handle(out, AutofedRun { report, clients });
                AutofedStatus::Ok
            }
            Err(e) => {
                let status = if e.exit_code() == 1 {
                    AutofedStatus::ConfigError
                } else {
                    AutofedStatus::RuntimeError
                };
                fail(status, e)
            }
        }
    })
}

/// Path of the written report; valid while `run` lives.
///
/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn autofed_run_report_path(run: *const AutofedRun) -> *const c_char {
    if run.is_null() {
        return ptr::null();
    }
    (*run).report.as_ptr()
}

/// # Safety
/// `run` must be a live run handle.
#[no_mangle]
pub unsafe extern "C" fn autofed_run_client_count(run: *const AutofedRun) -> usize {
    if run.is_null() {
        0
    } else {
        (*run).clients.len()
    }
}

/// Test metrics of the client at `index` (run order). `NotFound` when the
/// client had no test windows.
///
/// # Safety
/// `run` must be a live run handle; `client_id`, `nodes` and `metrics` must
/// be writable or null.
#[no_mangle]
pub unsafe extern "C" fn autofed_run_client_metrics(
    run: *const AutofedRun,
    index: usize,
    client_id: *mut usize,
    nodes: *mut usize,
    metrics: *mut AutofedMetrics,
) -> AutofedStatus {
    if run.is_null() {
        return fail(AutofedStatus::NullPointer, "run is null");
    }
    let run = &*run;
    let Some(&(id, n, test)) = run.clients.get(index) else {
        return fail(
            AutofedStatus::InvalidArgument,
            format!("client index {index} out of range"),
        );
    };
    if !client_id.is_null() {
        *client_id = id;
    }
    if !nodes.is_null() {
        *nodes = n;
    }
    match test {
        Some(m) => {
            if !metrics.is_null() {
                *metrics = m.into();
            }
            AutofedStatus::Ok
        }
        None => fail(AutofedStatus::NotFound, format!("client {id} has no test windows")),
    }
}

/// # Safety
/// `run` must be null or a handle from `autofed_run` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn autofed_run_free(run: *mut AutofedRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// MAE, RMSE, MSE and masked MAPE over `len` paired values. Targets with
/// `|y| < mape_threshold` are left out of MAPE.
///
/// # Safety
/// `prediction` and `target` must point to `len` readable doubles; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_evaluate(
    prediction: *const f64,
    target: *const f64,
    len: usize,
    mape_threshold: f64,
    out: *mut AutofedMetrics,
) -> AutofedStatus {
    guard(|| {
        if prediction.is_null() || target.is_null() || out.is_null() {
            return fail(AutofedStatus::NullPointer, "prediction, target or out is null");
        }
        let p = slice::from_raw_parts(prediction, len);
        let t = slice::from_raw_parts(target, len);
        match evaluate_slices(p, t, mape_threshold) {
            Ok(m) => {
                *out = m.into();
                AutofedStatus::Ok
            }
            Err(e) => fail(AutofedStatus::InvalidArgument, e),
        }
    })
}

fn wrap_snapshot(inner: Snapshot) -> AutofedSnapshot {
    let names = inner
        .entries
        .keys()
        .map(|k| CString::new(k.as_str()).unwrap_or_default())
        .collect();
    AutofedSnapshot { inner, names }
}

/// Decodes a serialized parameter set (count-prefixed name/shape/f64 records).
///
/// # Safety
/// `bytes` must point to `len` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_decode(
    bytes: *const u8,
    len: usize,
    out: *mut *mut AutofedSnapshot,
) -> AutofedStatus {
    guard(|| {
        if bytes.is_null() || out.is_null() {
            return fail(AutofedStatus::NullPointer, "bytes or out is null");
        }
        let mut data = slice::from_raw_parts(bytes, len);
        match Snapshot::read_from(&mut data) {
            Ok(s) if data.is_empty() => {
                put_handle(out, wrap_snapshot(s));
                AutofedStatus::Ok
            }
            Ok(_) => fail(AutofedStatus::InvalidArgument, format!("{} trailing bytes", data.len())),
            Err(e) => fail(AutofedStatus::InvalidArgument, e),
        }
    })
}

/// Serializes into `buf`. `written` receives the encoded size; when
/// `capacity` is too small nothing is copied and `BufferTooSmall` returned,
/// so a null `buf` with zero capacity queries the size.
///
/// # Safety
/// `snapshot` must be live; `buf` must have `capacity` writable bytes;
/// `written` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_encode(
    snapshot: *const AutofedSnapshot,
    buf: *mut u8,
    capacity: usize,
    written: *mut usize,
) -> AutofedStatus {
    guard(|| {
        if snapshot.is_null() || written.is_null() {
            return fail(AutofedStatus::NullPointer, "snapshot or written is null");
        }
        let bytes = (*snapshot).inner.to_bytes();
        *written = bytes.len();
        if buf.is_null() || capacity < bytes.len() {
            return fail(
                AutofedStatus::BufferTooSmall,
                format!("need {} bytes, have {capacity}", bytes.len()),
            );
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        AutofedStatus::Ok
    })
}

/// Number of named tensors.
///
/// # Safety
/// `snapshot` must be live.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_len(snapshot: *const AutofedSnapshot) -> usize {
    if snapshot.is_null() {
        0
    } else {
        (*snapshot).names.len()
    }
}

/// Total scalar count over all tensors.
///
/// # Safety
/// `snapshot` must be live.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_numel(snapshot: *const AutofedSnapshot) -> usize {
    if snapshot.is_null() {
        0
    } else {
        (*snapshot).inner.numel()
    }
}

/// Name of the tensor at `index` in ascending name order; valid while the
/// snapshot lives. Null when out of range.
///
/// # Safety
/// `snapshot` must be live.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_name(snapshot: *const AutofedSnapshot, index: usize) -> *const c_char {
    if snapshot.is_null() {
        return ptr::null();
    }
    let snapshot = &*snapshot;
    snapshot.names.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Copies the values of tensor `name` into `values` (row-major). `numel`
/// receives the element count; sizing follows `autofed_snapshot_encode`.
///
/// # Safety
/// `snapshot` must be live; `name` NUL-terminated; `values` must have
/// `capacity` writable doubles; `numel` must be writable.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_values(
    snapshot: *const AutofedSnapshot,
    name: *const c_char,
    values: *mut f64,
    capacity: usize,
    numel: *mut usize,
) -> AutofedStatus {
    guard(|| {
        if snapshot.is_null() || numel.is_null() {
            return fail(AutofedStatus::NullPointer, "snapshot or numel is null");
        }
        let name = match str_arg(name, "name") {
            Ok(n) => n,
            Err(s) => return s,
        };
        let Some(t) = (*snapshot).inner.get(name) else {
            return fail(AutofedStatus::NotFound, format!("no tensor named {name}"));
        };
        *numel = t.numel();
        if values.is_null() || capacity < t.numel() {
            return fail(
                AutofedStatus::BufferTooSmall,
                format!("need {} values, have {capacity}", t.numel()),
            );
        }
        ptr::copy_nonoverlapping(t.data().as_ptr(), values, t.numel());
        AutofedStatus::Ok
    })
}

/// # Safety
/// `snapshot` must be null or a handle from `autofed_snapshot_decode` not
/// yet freed.
#[no_mangle]
pub unsafe extern "C" fn autofed_snapshot_free(snapshot: *mut AutofedSnapshot) {
    if !snapshot.is_null() {
        drop(Box::from_raw(snapshot));
    }
}
