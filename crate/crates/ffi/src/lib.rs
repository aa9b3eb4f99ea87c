//! C ABI over `kvwait`.
//!
//! Every fallible call returns a [`KvwaitStatus`]; on failure the message is
//! kept per thread and can be read with [`kvwait_last_error`]. Scenarios are
//! opaque handles created by `kvwait_scenario_from_*` and released with
//! [`kvwait_scenario_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use kvwait::fluid::{solve_equilibrium, FluidEquilibrium, SystemConfig};
use kvwait::metrics::finalize;
use kvwait::policy::solve_theta;
use kvwait::scenario::Scenario;
use kvwait::workload::PromptType;
use kvwait::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KvwaitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Unstable = 3,
    Infeasible = 4,
    Config = 5,
    Io = 6,
    Unsatisfiable = 7,
    Internal = 8,
    Panic = 9,
}

impl From<&Error> for KvwaitStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Self::InvalidArgument,
            Error::Unstable { .. } => Self::Unstable,
            Error::Infeasible(_) => Self::Infeasible,
            Error::Config(_) | Error::Trace { .. } => Self::Config,
            Error::Io { .. } | Error::Csv(_) => Self::Io,
            Error::Unsatisfiable { .. } => Self::Unsatisfiable,
            Error::Internal(_) => Self::Internal,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: KvwaitStatus, msg: impl Into<String>) -> KvwaitStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), KvwaitStatus>) -> KvwaitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KvwaitStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(KvwaitStatus::Panic, "panic inside kvwait"),
    }
}

fn lib_err(e: Error) -> KvwaitStatus {
    let s = KvwaitStatus::from(&e);
    fail(s, e.to_string())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, KvwaitStatus> {
    if p.is_null() {
        return Err(fail(KvwaitStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KvwaitStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Last error message on this thread, or null after a successful call. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn kvwait_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn kvwait_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Opaque scenario handle.
pub struct KvwaitScenario {
    inner: Scenario,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KvwaitEquilibrium {
    /// Seconds per iteration.
    pub delta_t: f64,
    /// Tokens.
    pub memory: f64,
    /// Tokens per second.
    pub throughput: f64,
    pub margin: f64,
}

impl From<&FluidEquilibrium> for KvwaitEquilibrium {
    fn from(eq: &FluidEquilibrium) -> Self {
        Self {
            delta_t: eq.delta_t,
            memory: eq.memory,
            throughput: eq.throughput,
            margin: eq.margin,
        }
    }
}

/// Summary of one run. Means are NaN when no prompt completed.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KvwaitMetrics {
    pub throughput_tps: f64,
    pub mean_latency_s: f64,
    pub mean_ttft_s: f64,
    pub gap_tps: f64,
    pub horizon_s: f64,
    pub completions: u64,
    pub evictions: u64,
    pub iterations: u64,
    pub invariant_violations: u64,
}

unsafe fn store_scenario(s: Scenario, out: *mut *mut KvwaitScenario) {
    *out = Box::into_raw(Box::new(KvwaitScenario { inner: s }));
}

/// Parses a TOML scenario. Relative paths inside resolve against `base_dir`,
/// which may be null for the current directory.
///
/// # Safety
/// `toml` must be a NUL-terminated string, `base_dir` null or one, and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvwait_scenario_from_toml(
    toml: *const c_char,
    base_dir: *const c_char,
    out: *mut *mut KvwaitScenario,
) -> KvwaitStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(KvwaitStatus::NullPointer, "out is null"));
        }
        let text = str_arg(toml, "toml")?;
        let base = if base_dir.is_null() { "." } else { str_arg(base_dir, "base_dir")? };
        let s = Scenario::from_toml(text, Path::new(base)).map_err(lib_err)?;
        store_scenario(s, out);
        Ok(())
    })
}

/// Loads a TOML scenario file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvwait_scenario_from_path(path: *const c_char, out: *mut *mut KvwaitScenario) -> KvwaitStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(KvwaitStatus::NullPointer, "out is null"));
        }
        let p = str_arg(path, "path")?;
        let s = Scenario::from_path(Path::new(p)).map_err(lib_err)?;
        store_scenario(s, out);
        Ok(())
    })
}

/// Releases a scenario. Null is ignored.
///
/// # Safety
/// `scenario` must come from `kvwait_scenario_from_*` and not be used again.
#[no_mangle]
pub unsafe extern "C" fn kvwait_scenario_free(scenario: *mut KvwaitScenario) {
    if !scenario.is_null() {
        drop(Box::from_raw(scenario));
    }
}

/// Number of prompt types in the scenario, 0 for a null handle.
///
/// # Safety
/// `scenario` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn kvwait_scenario_num_types(scenario: *const KvwaitScenario) -> usize {
    scenario.as_ref().map_or(0, |s| s.inner.types.len())
}

/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvwait_scenario_equilibrium(
    scenario: *const KvwaitScenario,
    out: *mut KvwaitEquilibrium,
) -> KvwaitStatus {
    guard(|| {
        let (Some(s), false) = (scenario.as_ref(), out.is_null()) else {
            return Err(fail(KvwaitStatus::NullPointer, "scenario or out is null"));
        };
        let eq = s.inner.equilibrium().map_err(lib_err)?;
        *out = KvwaitEquilibrium::from(&eq);
        Ok(())
    })
}

/// Simulates one seed of the scenario.
///
/// # Safety
/// `scenario` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvwait_scenario_run(
    scenario: *const KvwaitScenario,
    seed: u64,
    out: *mut KvwaitMetrics,
) -> KvwaitStatus {
    guard(|| {
        let (Some(s), false) = (scenario.as_ref(), out.is_null()) else {
            return Err(fail(KvwaitStatus::NullPointer, "scenario or out is null"));
        };
        let outcome = s.inner.run_seed(seed).map_err(lib_err)?;
        let r = finalize(&outcome, &s.inner.types).map_err(lib_err)?;
        *out = KvwaitMetrics {
            throughput_tps: r.throughput_tps,
            mean_latency_s: r.mean_latency_s.unwrap_or(f64::NAN),
            mean_ttft_s: r.mean_ttft_s.unwrap_or(f64::NAN),
            gap_tps: r.gap_tps,
            horizon_s: r.horizon,
            completions: r.completions as u64,
            evictions: r.evictions as u64,
            iterations: r.iterations,
            invariant_violations: r.invariant_violations,
        };
        Ok(())
    })
}

/// Fluid equilibrium of `m` types given as parallel arrays.
///
/// # Safety
/// Each array must hold `m` elements and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvwait_fluid_solve(
    prefill_len: *const u32,
    decode_len: *const u32,
    rate: *const f64,
    m: usize,
    d0: f64,
    d1: f64,
    out: *mut KvwaitEquilibrium,
) -> KvwaitStatus {
    guard(|| {
        if prefill_len.is_null() || decode_len.is_null() || rate.is_null() || out.is_null() {
            return Err(fail(KvwaitStatus::NullPointer, "array or out is null"));
        }
        if m == 0 {
            return Err(fail(KvwaitStatus::InvalidArgument, "need at least one type"));
        }
        let (l, lp, r) = (
            std::slice::from_raw_parts(prefill_len, m),
            std::slice::from_raw_parts(decode_len, m),
            std::slice::from_raw_parts(rate, m),
        );
        let types = (0..m)
            .map(|j| PromptType::new(j, l[j], lp[j], r[j]))
            .collect::<Result<Vec<_>, _>>()
            .map_err(lib_err)?;
        let cfg = SystemConfig::unbounded(d0, d1).map_err(lib_err)?;
        let eq = solve_equilibrium(&types, &cfg).map_err(lib_err)?;
        *out = KvwaitEquilibrium::from(&eq);
        Ok(())
    })
}

/// Positive root theta of `-theta n_k + n_prev ln(1 - p + p e^theta) = 0`.
///
/// # Safety
/// `theta` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kvwait_solve_theta(n_prev: u32, n_k: u32, p: f64, theta: *mut f64) -> KvwaitStatus {
    guard(|| {
        if theta.is_null() {
            return Err(fail(KvwaitStatus::NullPointer, "theta is null"));
        }
        *theta = solve_theta(n_prev, n_k, p).map_err(lib_err)?.theta;
        Ok(())
    })
}
