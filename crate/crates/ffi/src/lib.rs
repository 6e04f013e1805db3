//! C ABI over the closed-form flows, the exact posterior and the experiment
//! runner.
//!
//! Matrices cross the boundary row-major. Every output buffer comes with its
//! length, which must be at least the number of values written. Functions
//! return an [`EkiStatus`]; on failure [`eki_last_error`] describes the cause
//! on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use eki::bayes::{exact_posterior, GaussianMeasure};
use eki::covariance::{asymptotic_profile, covariance_at, covariance_limit, FlowConfig};
use eki::harness::{parse_config, run_experiment, HarnessError};
use eki::mean::{asymptotic_limit, map_estimator, mean_at};
use eki::problem::InverseProblem;
use eki::spectral::integrate_dae_on_grid;
use eki::EkiError;
use nalgebra::{DMatrix, DVector};

/// Result codes shared by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EkiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    Numerical = 5,
    Config = 6,
    Io = 7,
    CheckFailed = 8,
    Panic = 9,
}

/// Opaque flow handle: forward problem, prior and `alpha`.
pub struct EkiFlow {
    prob: InverseProblem,
    cfg: FlowConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(EkiStatus, String);

impl From<EkiError> for Failure {
    fn from(e: EkiError) -> Self {
        let status = match &e {
            EkiError::DimensionMismatch { .. } => EkiStatus::DimensionMismatch,
            EkiError::NotSymmetric { .. }
            | EkiError::NotPositiveDefinite { .. }
            | EkiError::NotPositiveSemidefinite { .. } => EkiStatus::NotPositiveDefinite,
            EkiError::Singular(_) => EkiStatus::Numerical,
            _ => EkiStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(c) => Failure(EkiStatus::Config, c.to_string()),
            HarnessError::Compute(c) => c.into(),
            HarnessError::Io(io) => Failure(EkiStatus::Io, io.to_string()),
        }
    }
}

fn fail(status: EkiStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Run `f`, record any failure or panic, and return its status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EkiStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            EkiStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EkiStatus::Panic
        }
    }
}

unsafe fn read<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(fail(EkiStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn write(out: *mut f64, out_len: usize, values: &[f64], what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(EkiStatus::NullPointer, format!("{what} is null")));
    }
    if out_len < values.len() {
        return Err(fail(
            EkiStatus::DimensionMismatch,
            format!("{what} holds {out_len} values, need {}", values.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

unsafe fn flow_ref<'a>(flow: *const EkiFlow) -> Result<&'a EkiFlow, Failure> {
    flow.as_ref().ok_or_else(|| fail(EkiStatus::NullPointer, "flow handle is null"))
}

/// Create a flow for `y = A u + noise` (`A` is `m x n`, `Gamma` is `m x m`)
/// with prior moments `(m0, C0)` and `alpha >= 1`.
///
/// # Safety
/// Input pointers must reference arrays of the stated sizes; `out` must be
/// writable. Release the handle with [`eki_flow_free`].
#[no_mangle]
pub unsafe extern "C" fn eki_flow_new(
    n: usize,
    m: usize,
    a: *const f64,
    gamma: *const f64,
    y: *const f64,
    m0: *const f64,
    c0: *const f64,
    alpha: f64,
    out: *mut *mut EkiFlow,
) -> EkiStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(EkiStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        if n == 0 || m == 0 {
            return Err(fail(EkiStatus::InvalidArgument, "dimensions must be positive"));
        }
        let a = DMatrix::from_row_slice(m, n, read(a, m * n, "A")?);
        let gamma = DMatrix::from_row_slice(m, m, read(gamma, m * m, "Gamma")?);
        let y = DVector::from_column_slice(read(y, m, "y")?);
        let m0 = DVector::from_column_slice(read(m0, n, "m0")?);
        let c0 = DMatrix::from_row_slice(n, n, read(c0, n * n, "C0")?);
        let prob = InverseProblem::new(a, gamma, y)?;
        let cfg = FlowConfig::new(alpha, c0, m0, &prob)?;
        *out = Box::into_raw(Box::new(EkiFlow { prob, cfg }));
        Ok(())
    })
}

/// # Safety
/// `flow` must come from [`eki_flow_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn eki_flow_free(flow: *mut EkiFlow) {
    if !flow.is_null() {
        drop(Box::from_raw(flow));
    }
}

/// Parameter dimension `n`, or 0 for a null handle.
///
/// # Safety
/// `flow` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn eki_flow_dim(flow: *const EkiFlow) -> usize {
    flow.as_ref().map_or(0, |f| f.cfg.dim())
}

/// Covariance `C(t)`, `n x n`.
///
/// # Safety
/// `flow` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eki_covariance_at(flow: *const EkiFlow, t: f64, out: *mut f64, out_len: usize) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        write(out, out_len, &row_major(&covariance_at(&f.cfg, t)?), "out")
    })
}

/// Mean `m(t)` started from the prior mean, length `n`.
///
/// # Safety
/// `flow` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eki_mean_at(flow: *const EkiFlow, t: f64, out: *mut f64, out_len: usize) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        write(out, out_len, mean_at(&f.cfg, &f.prob, &f.cfg.m0, t)?.as_slice(), "out")
    })
}

/// Long-time limits: covariance `n x n` and mean `n`. Either output may be null.
///
/// # Safety
/// `flow` must be a live handle; non-null outputs must hold their stated lengths.
#[no_mangle]
pub unsafe extern "C" fn eki_limit(
    flow: *const EkiFlow,
    cov_out: *mut f64,
    cov_len: usize,
    mean_out: *mut f64,
    mean_len: usize,
) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        if !cov_out.is_null() {
            write(cov_out, cov_len, &row_major(&covariance_limit(&f.cfg)), "cov_out")?;
        }
        if !mean_out.is_null() {
            let lim = asymptotic_limit(&f.cfg, &f.prob, &f.cfg.m0)?;
            write(mean_out, mean_len, lim.x_infinity.as_slice(), "mean_out")?;
        }
        Ok(())
    })
}

/// Asymptotic profile `lim t (C(t) - C_inf)`, `n x n`.
///
/// # Safety
/// `flow` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eki_profile(flow: *const EkiFlow, out: *mut f64, out_len: usize) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        write(out, out_len, &row_major(&asymptotic_profile(&f.cfg)), "out")
    })
}

/// Exact Gaussian posterior of the prior and data held by `flow`.
///
/// # Safety
/// `flow` must be a live handle; `mean_out` holds `n`, `cov_out` holds `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn eki_posterior(
    flow: *const EkiFlow,
    mean_out: *mut f64,
    mean_len: usize,
    cov_out: *mut f64,
    cov_len: usize,
) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        let post = exact_posterior(&GaussianMeasure::new(f.cfg.m0.clone(), f.cfg.c0.clone())?, &f.prob)?;
        write(mean_out, mean_len, post.mean.as_slice(), "mean_out")?;
        write(cov_out, cov_len, &row_major(&post.cov), "cov_out")
    })
}

/// Tikhonov-regularized estimate with regularization time `t`.
///
/// # Safety
/// `flow` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eki_map(flow: *const EkiFlow, t: f64, out: *mut f64, out_len: usize) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        let p = &f.prob;
        write(out, out_len, map_estimator(&f.cfg.c0, &f.cfg.m0, &p.a, &p.gamma, &p.y, t)?.as_slice(), "out")
    })
}

/// Eigenvalues of `C(t)`, descending, from the eigenvalue/eigenvector flow
/// integrated with step `dt`.
///
/// # Safety
/// `flow` must be a live handle and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eki_eigenvalues(
    flow: *const EkiFlow,
    t: f64,
    dt: f64,
    out: *mut f64,
    out_len: usize,
) -> EkiStatus {
    guard(|| {
        let f = flow_ref(flow)?;
        let traj = integrate_dae_on_grid(&f.cfg, &[t], dt)?;
        write(out, out_len, traj.final_state().lambdas.as_slice(), "out")
    })
}

/// Run the experiment in the JSON config at `config_path`. `output_dir` may
/// be null to use the configured directory. Returns `EKI_STATUS_CHECK_FAILED`
/// when the run completes but a check fails; `passed` (nullable) receives 1 or 0.
///
/// # Safety
/// Strings must be NUL-terminated; `passed` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn eki_run_experiment(
    config_path: *const c_char,
    output_dir: *const c_char,
    passed: *mut c_int,
) -> EkiStatus {
    guard(|| {
        if config_path.is_null() {
            return Err(fail(EkiStatus::NullPointer, "config_path is null"));
        }
        let text = |p: *const c_char| {
            CStr::from_ptr(p).to_str().map_err(|_| fail(EkiStatus::InvalidArgument, "path is not UTF-8"))
        };
        let cfg = parse_config(Path::new(text(config_path)?)).map_err(HarnessError::from)?;
        let dir = if output_dir.is_null() { cfg.output_dir() } else { text(output_dir)?.into() };
        let summary = run_experiment(&cfg, &dir)?;
        if !passed.is_null() {
            *passed = c_int::from(summary.passed);
        }
        if summary.passed {
            Ok(())
        } else {
            let failed: Vec<&str> = summary.checks.iter().filter(|(_, ok)| !**ok).map(|(k, _)| k.as_str()).collect();
            Err(fail(EkiStatus::CheckFailed, format!("failed checks: {}", failed.join(", "))))
        }
    })
}

/// Message for the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn eki_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}
