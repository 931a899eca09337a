//! C ABI over the simulator.
//!
//! Every fallible call returns a [`FedlpStatus`]; on anything other than
//! `FEDLP_STATUS_OK` a description is available from
//! [`fedlp_last_error_message`] on the same thread. Simulations are opaque
//! handles created by `fedlp_simulation_new` / `fedlp_simulation_from_file`
//! and released with `fedlp_simulation_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fedlp::config::RunConfig;
use fedlp::metrics::emit_csv;
use fedlp::{Error, Simulation};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FedlpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Io = 4,
    Runtime = 5,
    /// The simulation has already run all its rounds.
    Finished = 6,
    Panic = 7,
}

/// Metrics of one completed round. `evaluated` is 0 when the global model
/// was not tested that round, in which case `test_accuracy` is NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedlpRoundMetrics {
    pub round: u32,
    pub participants: u64,
    pub evaluated: u8,
    pub test_accuracy: f64,
    pub upload_params: u64,
    pub download_params: u64,
    pub mean_flops: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FedlpProp1Report {
    pub k: u64,
    pub p: f64,
    pub trials: u64,
    pub empirical_ratio: f64,
    pub closed_form: f64,
    pub abs_error: f64,
    pub std_error: f64,
    pub within_three_sigma: u8,
}

/// Opaque simulation handle.
pub struct FedlpSimulation {
    sim: Simulation,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> FedlpStatus {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::InsufficientSamples { .. } => {
            FedlpStatus::Config
        }
        Error::Io { .. }
        | Error::IdxMagic { .. }
        | Error::IdxTruncated { .. }
        | Error::IdxCountMismatch { .. } => FedlpStatus::Io,
        _ => FedlpStatus::Runtime,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (FedlpStatus, String)>) -> FedlpStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FedlpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            FedlpStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (FedlpStatus, String) {
    (status_of(&e), e.to_string())
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, (FedlpStatus, String)> {
    if ptr.is_null() {
        return Err((FedlpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| (FedlpStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn build(rc: RunConfig, out: *mut *mut FedlpSimulation) -> Result<(), (FedlpStatus, String)> {
    let sim = Simulation::new(rc.experiment).map_err(lib_err)?;
    // SAFETY: caller checked `out` for null.
    unsafe { *out = Box::into_raw(Box::new(FedlpSimulation { sim })) };
    Ok(())
}

/// Creates a simulation from config-file text. On success `*out` receives
/// a handle owned by the caller.
///
/// # Safety
/// `config_text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_new(
    config_text: *const c_char,
    out: *mut *mut FedlpSimulation,
) -> FedlpStatus {
    guard(|| {
        if out.is_null() {
            return Err((FedlpStatus::NullPointer, "out is null".into()));
        }
        let text = str_arg(config_text, "config_text")?;
        let rc = RunConfig::from_text(text, &[]).map_err(lib_err)?;
        build(rc, out)
    })
}

/// Creates a simulation from a config file path.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_from_file(
    path: *const c_char,
    out: *mut *mut FedlpSimulation,
) -> FedlpStatus {
    guard(|| {
        if out.is_null() {
            return Err((FedlpStatus::NullPointer, "out is null".into()));
        }
        let path = str_arg(path, "path")?;
        let rc = RunConfig::from_file(path, &[]).map_err(lib_err)?;
        build(rc, out)
    })
}

fn fill(m: &fedlp::RoundMetrics) -> FedlpRoundMetrics {
    FedlpRoundMetrics {
        round: m.round,
        participants: m.participants as u64,
        evaluated: u8::from(m.is_evaluated()),
        test_accuracy: m.test_accuracy.unwrap_or(f64::NAN),
        upload_params: m.upload_params,
        download_params: m.download_params,
        mean_flops: m.mean_flops(),
    }
}

/// Runs one global round. `out` may be null.
///
/// # Safety
/// `sim` must be a live handle; `out`, if non-null, must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_step(
    sim: *mut FedlpSimulation,
    out: *mut FedlpRoundMetrics,
) -> FedlpStatus {
    guard(|| {
        let sim = sim
            .as_mut()
            .ok_or((FedlpStatus::NullPointer, "sim is null".to_string()))?;
        if sim.sim.is_finished() {
            return Err((FedlpStatus::Finished, "all rounds already run".into()));
        }
        let outcome = sim.sim.run_round().map_err(lib_err)?;
        if let Some(out) = out.as_mut() {
            *out = fill(&outcome.metrics);
        }
        Ok(())
    })
}

/// Runs all remaining rounds.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_run(sim: *mut FedlpSimulation) -> FedlpStatus {
    guard(|| {
        let sim = sim
            .as_mut()
            .ok_or((FedlpStatus::NullPointer, "sim is null".to_string()))?;
        sim.sim.run().map_err(lib_err)?;
        Ok(())
    })
}

/// Rounds completed so far; 0 for a null handle.
///
/// # Safety
/// `sim` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_round(sim: *const FedlpSimulation) -> u32 {
    sim.as_ref().map_or(0, |s| s.sim.round())
}

/// Writes the metrics CSV for the rounds run so far.
///
/// # Safety
/// `sim` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_write_csv(
    sim: *const FedlpSimulation,
    path: *const c_char,
) -> FedlpStatus {
    guard(|| {
        let sim = sim
            .as_ref()
            .ok_or((FedlpStatus::NullPointer, "sim is null".to_string()))?;
        let path = PathBuf::from(str_arg(path, "path")?);
        emit_csv(sim.sim.history(), path).map_err(lib_err)
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `sim` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fedlp_simulation_free(sim: *mut FedlpSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Monte-Carlo estimate of the expected aggregate scaling for `k`
/// participants keeping a layer with probability `p`.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fedlp_verify_prop1(
    k: u64,
    p: f64,
    trials: u64,
    seed: u64,
    out: *mut FedlpProp1Report,
) -> FedlpStatus {
    guard(|| {
        let out = out
            .as_mut()
            .ok_or((FedlpStatus::NullPointer, "out is null".to_string()))?;
        let r = fedlp::verify_prop1(k as usize, p, trials, seed).map_err(lib_err)?;
        *out = FedlpProp1Report {
            k: r.k as u64,
            p: r.p,
            trials: r.trials,
            empirical_ratio: r.empirical_ratio,
            closed_form: r.closed_form,
            abs_error: r.abs_error,
            std_error: r.std_error,
            within_three_sigma: u8::from(r.within_three_sigma()),
        };
        Ok(())
    })
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn fedlp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fedlp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
