//! C ABI over the certification engine.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free` function. Every fallible call returns a
//! [`PcStatus`] and leaves a message for [`pc_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use poisoncert::cli::RunConfig;
use poisoncert::encode::{build, emit_to_string};
use poisoncert::solve::{branch_and_bound, heuristic_certificate, Certificate, Status};
use poisoncert::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Bad configuration, data or threat model.
    Config = 3,
    Internal = 4,
    Panic = 5,
    /// Output buffer too small; the needed length was still written.
    BufferTooSmall = 6,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcCertStatus {
    Optimal = 0,
    Bounded = 1,
    Timeout = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcSummary {
    pub status: PcCertStatus,
    pub primal: f64,
    pub bound: f64,
    pub gap: f64,
    pub nodes: usize,
    pub poisoned: usize,
}

/// A parsed run configuration.
pub struct PcConfig {
    inner: RunConfig,
}

/// A finished certificate.
pub struct PcCertificate {
    inner: Certificate,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(err: Error) -> PcStatus {
    set_error(err.to_string());
    if err.is_config_error() {
        PcStatus::Config
    } else {
        PcStatus::Internal
    }
}

fn guard(f: impl FnOnce() -> PcStatus) -> PcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("panic inside poisoncert");
            PcStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(s: *const c_char) -> Result<&'a str, PcStatus> {
    if s.is_null() {
        set_error("null string argument");
        return Err(PcStatus::NullArgument);
    }
    CStr::from_ptr(s).to_str().map_err(|_| {
        set_error("string argument is not UTF-8");
        PcStatus::InvalidUtf8
    })
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).expect("nul bytes removed").into_raw()
}

/// Message of the last failed call on this thread, or NULL. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn pc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn pc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn config_from(text: *const c_char, out: *mut *mut PcConfig, json: bool) -> PcStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return PcStatus::NullArgument;
        }
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let parsed = if json { RunConfig::from_json(text) } else { RunConfig::from_toml(text) };
        match parsed {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PcConfig { inner }));
                PcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Parses a TOML run configuration.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_config_from_toml(text: *const c_char, out: *mut *mut PcConfig) -> PcStatus {
    config_from(text, out, false)
}

/// Parses a JSON run configuration.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_config_from_json(text: *const c_char, out: *mut *mut PcConfig) -> PcStatus {
    config_from(text, out, true)
}

/// # Safety
/// `cfg` must come from `pc_config_from_*` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pc_config_free(cfg: *mut PcConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Sets the wall-clock limit in seconds; a non-positive value removes it.
///
/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn pc_config_set_time_limit(cfg: *mut PcConfig, seconds: f64) -> PcStatus {
    let Some(cfg) = cfg.as_mut() else {
        set_error("null config");
        return PcStatus::NullArgument;
    };
    cfg.inner.solver.time_limit = (seconds > 0.0).then_some(seconds);
    PcStatus::Ok
}

/// # Safety
/// `cfg` must be a live config handle.
#[no_mangle]
pub unsafe extern "C" fn pc_config_set_deterministic(cfg: *mut PcConfig, on: bool) -> PcStatus {
    let Some(cfg) = cfg.as_mut() else {
        set_error("null config");
        return PcStatus::NullArgument;
    };
    cfg.inner.solver.deterministic = on;
    PcStatus::Ok
}

unsafe fn solve_with(
    cfg: *const PcConfig,
    out: *mut *mut PcCertificate,
    heuristic_only: bool,
) -> PcStatus {
    guard(|| {
        let Some(cfg) = cfg.as_ref() else {
            set_error("null config");
            return PcStatus::NullArgument;
        };
        if out.is_null() {
            set_error("null output pointer");
            return PcStatus::NullArgument;
        }
        let run = || -> poisoncert::Result<Certificate> {
            let p = cfg.inner.prepare()?;
            let mut c = if heuristic_only {
                heuristic_certificate(&p.train, &p.dataset, &p.threat, &p.objective, &p.solve)?
            } else {
                branch_and_bound(&p.train, &p.dataset, &p.threat, &p.objective, &p.solve)?
            };
            c.provenance.init_seed = cfg.inner.train.init.seed();
            Ok(c)
        };
        match run() {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PcCertificate { inner }));
                PcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Runs branch-and-bound certification.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_certify(cfg: *const PcConfig, out: *mut *mut PcCertificate) -> PcStatus {
    solve_with(cfg, out, false)
}

/// Runs the heuristic attack search; the bound is the root interval bound.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_attack(cfg: *const PcConfig, out: *mut *mut PcCertificate) -> PcStatus {
    solve_with(cfg, out, true)
}

/// # Safety
/// `cert` must come from `pc_certify` or `pc_attack` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pc_certificate_free(cert: *mut PcCertificate) {
    if !cert.is_null() {
        drop(Box::from_raw(cert));
    }
}

/// # Safety
/// `cert` must be a live certificate and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_certificate_summary(cert: *const PcCertificate, out: *mut PcSummary) -> PcStatus {
    let (Some(cert), false) = (cert.as_ref(), out.is_null()) else {
        set_error("null argument");
        return PcStatus::NullArgument;
    };
    let c = &cert.inner;
    *out = PcSummary {
        status: match c.status {
            Status::Optimal => PcCertStatus::Optimal,
            Status::Bounded => PcCertStatus::Bounded,
            Status::Timeout => PcCertStatus::Timeout,
        },
        primal: c.primal,
        bound: c.bound,
        gap: c.gap,
        nodes: c.provenance.nodes,
        poisoned: c.incumbent.budget_used(),
    };
    PcStatus::Ok
}

/// Copies the poisoned training indices into `buf` (capacity `cap`) and
/// stores their number in `len`. With a short buffer nothing is copied and
/// `PC_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `buf` must have room for `cap` values (or be NULL with `cap == 0`).
#[no_mangle]
pub unsafe extern "C" fn pc_certificate_poisoned(
    cert: *const PcCertificate,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> PcStatus {
    let (Some(cert), false) = (cert.as_ref(), len.is_null()) else {
        set_error("null argument");
        return PcStatus::NullArgument;
    };
    let idx = cert.inner.incumbent.poisoned_indices();
    *len = idx.len();
    if idx.len() > cap {
        set_error(format!("need room for {} indices", idx.len()));
        return PcStatus::BufferTooSmall;
    }
    if !idx.is_empty() {
        if buf.is_null() {
            set_error("null buffer");
            return PcStatus::NullArgument;
        }
        ptr::copy_nonoverlapping(idx.as_ptr(), buf, idx.len());
    }
    PcStatus::Ok
}

/// The certificate as JSON. Free the string with `pc_string_free`.
///
/// # Safety
/// `cert` must be a live certificate and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_certificate_to_json(cert: *const PcCertificate, out: *mut *mut c_char) -> PcStatus {
    guard(|| {
        let (Some(cert), false) = (cert.as_ref(), out.is_null()) else {
            set_error("null argument");
            return PcStatus::NullArgument;
        };
        match serde_json::to_string(&cert.inner) {
            Ok(s) => {
                *out = into_c_string(s);
                PcStatus::Ok
            }
            Err(e) => fail(e.into()),
        }
    })
}

/// Builds the attack model and returns it as model-file text. Free the
/// string with `pc_string_free`.
///
/// # Safety
/// `cfg` must be a live config handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pc_export(cfg: *const PcConfig, out: *mut *mut c_char) -> PcStatus {
    guard(|| {
        let (Some(cfg), false) = (cfg.as_ref(), out.is_null()) else {
            set_error("null argument");
            return PcStatus::NullArgument;
        };
        let run = || -> poisoncert::Result<String> {
            let p = cfg.inner.prepare()?;
            let (_, table) = poisoncert::cli::root_bounds(&p)?;
            let m = build(&p.train, &p.dataset, &p.threat, &p.objective, &table, &p.build)?;
            Ok(emit_to_string(&m))
        };
        match run() {
            Ok(s) => {
                *out = into_c_string(s);
                PcStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
