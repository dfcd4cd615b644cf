//! C ABI for the batch-optimisation library.
//!
//! All entry points are panic-safe and report failures through
//! [`SoberStatus`] codes; the per-thread message behind a non-zero status is
//! available from [`sober_last_error_message`]. Run results are opaque
//! handles freed with [`sober_result_free`]; returned strings are freed with
//! [`sober_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use sober::bench::{self, Policy};
use sober::solver::{History, SolverConfig};

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SoberStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    RunFailed = 4,
    Panic = 5,
}

/// Opaque handle to a finished run.
pub struct SoberRunResult {
    history: History,
}

fn parse_str<'a>(ptr: *const c_char) -> Result<&'a str, SoberStatus> {
    if ptr.is_null() {
        set_error("null pointer argument");
        return Err(SoberStatus::NullPointer);
    }
    unsafe { CStr::from_ptr(ptr) }.to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        SoberStatus::InvalidUtf8
    })
}

fn parse_policy(name: &str) -> Result<Policy, SoberStatus> {
    match name {
        "sober-lfi" => Ok(Policy::SoberLfi),
        "sober-ts" => Ok(Policy::SoberTs),
        "random" => Ok(Policy::Random),
        "batch-ts-baseline" => Ok(Policy::BatchTsBaseline),
        other => {
            set_error(&format!("unknown policy '{other}'"));
            Err(SoberStatus::InvalidArgument)
        }
    }
}

fn guarded<F: FnOnce() -> SoberStatus>(body: F) -> SoberStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            SoberStatus::Panic
        }
    }
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread; do not free it.
#[no_mangle]
pub extern "C" fn sober_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Runs a registered benchmark function under the named policy
/// (`sober-lfi`, `sober-ts`, `random` or `batch-ts-baseline`) with the given
/// solver configuration (JSON; `{}` for defaults) and seed.
///
/// On success writes an owned handle to `out`.
///
/// # Safety
/// `function`, `policy` and `config_json` must be NUL-terminated strings (or
/// null, which fails cleanly); `out` must point to writable storage for one
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn sober_run_function(
    function: *const c_char,
    policy: *const c_char,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut SoberRunResult,
) -> SoberStatus {
    guarded(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SoberStatus::NullPointer;
        }
        let function = match parse_str(function) {
            Ok(s) => s,
            Err(e) => return e,
        };
        let policy = match parse_str(policy).and_then(parse_policy) {
            Ok(p) => p,
            Err(e) => return e,
        };
        let config_text = match parse_str(config_json) {
            Ok(s) => s,
            Err(e) => return e,
        };
        let config = match SolverConfig::from_json(config_text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&e.to_string());
                return SoberStatus::InvalidArgument;
            }
        };
        match bench::run_single(function, policy, &config, seed, 1e-6) {
            Ok(history) => {
                if let Some(msg) = &history.aborted {
                    set_error(msg);
                    return SoberStatus::RunFailed;
                }
                let handle = Box::new(SoberRunResult { history });
                unsafe { *out = Box::into_raw(handle) };
                SoberStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                SoberStatus::RunFailed
            }
        }
    })
}

/// Number of recorded iterations; 0 for a null handle.
///
/// # Safety
/// `result` must be null or a handle from [`sober_run_function`].
#[no_mangle]
pub unsafe extern "C" fn sober_result_iterations(result: *const SoberRunResult) -> usize {
    if result.is_null() {
        return 0;
    }
    unsafe { &*result }.history.records.len()
}

/// Best observed objective value; NaN for a null handle.
///
/// # Safety
/// `result` must be null or a handle from [`sober_run_function`].
#[no_mangle]
pub unsafe extern "C" fn sober_result_incumbent_value(result: *const SoberRunResult) -> f64 {
    if result.is_null() {
        return f64::NAN;
    }
    unsafe { &*result }.history.incumbent_value
}

fn copy_out_string(text: String, out: *mut *mut c_char) -> SoberStatus {
    if out.is_null() {
        set_error("null output pointer");
        return SoberStatus::NullPointer;
    }
    match CString::new(text) {
        Ok(c) => {
            unsafe { *out = c.into_raw() };
            SoberStatus::Ok
        }
        Err(_) => {
            set_error("result contained an interior NUL byte");
            SoberStatus::InvalidArgument
        }
    }
}

/// Copies the per-iteration history as CSV into a newly allocated string.
///
/// # Safety
/// `out` must point to writable storage for one pointer; free the string
/// with [`sober_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sober_result_history_csv(
    result: *const SoberRunResult,
    out: *mut *mut c_char,
) -> SoberStatus {
    guarded(|| {
        if result.is_null() {
            set_error("null result handle");
            return SoberStatus::NullPointer;
        }
        copy_out_string(unsafe { &*result }.history.to_csv(), out)
    })
}

/// Copies the run summary as JSON into a newly allocated string.
///
/// # Safety
/// `out` must point to writable storage for one pointer; free the string
/// with [`sober_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sober_result_summary_json(
    result: *const SoberRunResult,
    out: *mut *mut c_char,
) -> SoberStatus {
    guarded(|| {
        if result.is_null() {
            set_error("null result handle");
            return SoberStatus::NullPointer;
        }
        copy_out_string(unsafe { &*result }.history.summary_json(), out)
    })
}

/// Frees a run handle; accepts null.
///
/// # Safety
/// `result` must have been produced by [`sober_run_function`] and not freed
/// before.
#[no_mangle]
pub unsafe extern "C" fn sober_result_free(result: *mut SoberRunResult) {
    if !result.is_null() {
        drop(unsafe { Box::from_raw(result) });
    }
}

/// Frees a string returned by this library; accepts null.
///
/// # Safety
/// `text` must have been returned by one of the `_csv`/`_json` functions and
/// not freed before.
#[no_mangle]
pub unsafe extern "C" fn sober_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

/// Lists the registered benchmark functions as a JSON array of
/// `{name, dim, constraints}` objects.
///
/// # Safety
/// `out` must point to writable storage for one pointer; free the string
/// with [`sober_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sober_list_functions(out: *mut *mut c_char) -> SoberStatus {
    guarded(|| {
        let entries: Vec<serde_json::Value> = bench::registry()
            .iter()
            .map(|f| {
                serde_json::json!({
                    "name": f.name,
                    "dim": f.dim(),
                    "constraints": f.constraint_count(),
                })
            })
            .collect();
        copy_out_string(
            serde_json::to_string_pretty(&entries).expect("registry serialises"),
            out,
        )
    })
}

/// Evaluates a registered function at `rows` points of dimension `cols`
/// given in row-major order, writing one value per row to `out_values`.
///
/// # Safety
/// `points` must reference `rows * cols` readable doubles and `out_values`
/// `rows` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sober_eval_function(
    function: *const c_char,
    points: *const f64,
    rows: usize,
    cols: usize,
    out_values: *mut f64,
) -> SoberStatus {
    guarded(|| {
        let function = match parse_str(function) {
            Ok(s) => s,
            Err(e) => return e,
        };
        if points.is_null() || out_values.is_null() {
            set_error("null data pointer");
            return SoberStatus::NullPointer;
        }
        if rows == 0 || cols == 0 {
            set_error("rows and cols must be positive");
            return SoberStatus::InvalidArgument;
        }
        let data = unsafe { std::slice::from_raw_parts(points, rows * cols) };
        let matrix = nalgebra::DMatrix::from_row_slice(rows, cols, data);
        match bench::eval_testfn(function, &matrix) {
            Ok(values) => {
                let out = unsafe { std::slice::from_raw_parts_mut(out_values, rows) };
                for (slot, v) in out.iter_mut().zip(values.iter()) {
                    *slot = *v;
                }
                SoberStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                SoberStatus::InvalidArgument
            }
        }
    })
}
