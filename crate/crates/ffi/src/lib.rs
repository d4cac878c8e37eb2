// SPDX-License-Identifier: Apache-2.0

//! C ABI for the nv-coherence simulator.
//!
//! A simulation is created from a JSON run configuration and used through an
//! opaque handle. Every fallible call returns an [`NvcStatus`]; the message
//! of the most recent failure on the calling thread is available from
//! [`nvc_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nv_coherence::cce::{gcce_coherence, CceConfig, SpinEnvironment};
use nv_coherence::config::RunConfig;
use nv_coherence::field::{find_clock_transitions, level_diagram, linspace, FieldGeometry};
use nv_coherence::pulse::{extract_decay_time, time_grid, DecayEstimate, DecayMethod, PulseProtocol, SequenceKind};
use nv_coherence::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NvcStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Numerical = 3,
    Unresolved = 4,
    Panic = 5,
    BufferTooSmall = 6,
}

/// Decay-time estimators accepted by [`nvc_decay_time`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NvcDecayMethod {
    OneOverE = 0,
    StretchedFit = 1,
}

/// Opaque simulation handle.
pub struct NvcSimulation {
    config: RunConfig,
    env: SpinEnvironment,
    cce: CceConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(err: &Error) -> NvcStatus {
    match err {
        Error::Config(_) | Error::Json(_) => NvcStatus::Config,
        _ => NvcStatus::Numerical,
    }
}

/// Runs `f`, mapping errors and panics to status codes.
fn guard(f: impl FnOnce() -> Result<(), (NvcStatus, String)>) -> NvcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NvcStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NvcStatus::Panic
        }
    }
}

fn lift<T>(r: nv_coherence::Result<T>) -> Result<T, (NvcStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (NvcStatus, String) {
    (NvcStatus::NullPointer, format!("{what} is null"))
}

/// Creates a simulation from a NUL-terminated JSON run configuration.
///
/// # Safety
/// `json` must be a valid NUL-terminated string and `out` a valid pointer.
/// On success `*out` owns a handle that must be released with
/// [`nvc_simulation_free`].
#[no_mangle]
pub unsafe extern "C" fn nvc_simulation_from_json(json: *const c_char, out: *mut *mut NvcSimulation) -> NvcStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if json.is_null() {
            return Err(null("json"));
        }
        let text = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| (NvcStatus::Config, "configuration is not valid UTF-8".to_string()))?;
        let config = lift(RunConfig::from_json(text))?;
        lift(config.validate())?;
        let env = lift(config.environment())?;
        let cce = lift(config.cce_config(&env))?;
        *out = Box::into_raw(Box::new(NvcSimulation { config, env, cce }));
        Ok(())
    })
}

/// Releases a handle. Null is accepted.
///
/// # Safety
/// `sim` must come from [`nvc_simulation_from_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nvc_simulation_free(sim: *mut NvcSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Number of nuclear spins in the simulation.
///
/// # Safety
/// `sim` must be a live handle or null (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn nvc_simulation_spin_count(sim: *const NvcSimulation) -> usize {
    sim.as_ref().map_or(0, |s| s.env.nuclei.len())
}

unsafe fn coherence(
    sim: *const NvcSimulation,
    kind: SequenceKind,
    times: *const f64,
    n: usize,
    re_out: *mut f64,
    im_out: *mut f64,
) -> NvcStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        if times.is_null() || re_out.is_null() || im_out.is_null() {
            return Err(null("times or output buffer"));
        }
        let times = std::slice::from_raw_parts(times, n);
        let protocol = PulseProtocol { kind, qubit_selector: sim.config.protocol.qubit };
        let curve = lift(gcce_coherence(&sim.env, &sim.cce, &protocol, times))?;
        let re = std::slice::from_raw_parts_mut(re_out, n);
        let im = std::slice::from_raw_parts_mut(im_out, n);
        for (k, v) in curve.values.iter().enumerate() {
            re[k] = v.re;
            im[k] = v.im;
        }
        Ok(())
    })
}

/// Ramsey coherence `L(t)` at the configured field, written to `re_out` and
/// `im_out` (each of length `n`). Times in µs, ascending, starting at 0.
///
/// # Safety
/// `times`, `re_out` and `im_out` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn nvc_run_ramsey(
    sim: *const NvcSimulation,
    times: *const f64,
    n: usize,
    re_out: *mut f64,
    im_out: *mut f64,
) -> NvcStatus {
    coherence(sim, SequenceKind::Ramsey, times, n, re_out, im_out)
}

/// Hahn-echo coherence `L(τ)`; `times` holds the total free evolution time.
///
/// # Safety
/// As for [`nvc_run_ramsey`].
#[no_mangle]
pub unsafe extern "C" fn nvc_run_hahn_echo(
    sim: *const NvcSimulation,
    times: *const f64,
    n: usize,
    re_out: *mut f64,
    im_out: *mut f64,
) -> NvcStatus {
    coherence(sim, SequenceKind::HahnEcho, times, n, re_out, im_out)
}

/// Decay time of the configured protocol on a `[0, window]` grid of
/// `points` samples. Returns [`NvcStatus::Unresolved`] when the coherence
/// does not decay far enough inside the window.
///
/// # Safety
/// `sim` must be a live handle and `t_out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nvc_decay_time(
    sim: *const NvcSimulation,
    window_us: f64,
    points: usize,
    method: NvcDecayMethod,
    t_out: *mut f64,
) -> NvcStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        let t_out = t_out.as_mut().ok_or_else(|| null("t_out"))?;
        let method = match method {
            NvcDecayMethod::OneOverE => DecayMethod::OneOverE,
            NvcDecayMethod::StretchedFit => DecayMethod::StretchedFit,
        };
        let times = lift(time_grid(window_us, points))?;
        let curve = lift(gcce_coherence(&sim.env, &sim.cce, &sim.config.protocol.protocol(), &times))?;
        match lift(extract_decay_time(&curve, method))? {
            DecayEstimate::Resolved(fit) => {
                *t_out = fit.t_char;
                Ok(())
            }
            DecayEstimate::Unresolved { envelope_min, .. } => {
                *t_out = f64::NAN;
                Err((
                    NvcStatus::Unresolved,
                    format!("no decay inside {window_us} us (envelope minimum {envelope_min})"),
                ))
            }
        }
    })
}

/// Clock transitions of the core system along the configured field
/// direction, scanning `b0` over `[b0_start, b0_stop]` with `points` samples.
/// Positions (G) go to `b0_out`; `*count_out` receives the number found. If
/// `capacity` is too small, nothing is written except `*count_out` and
/// [`NvcStatus::BufferTooSmall`] is returned.
///
/// # Safety
/// `b0_out` must hold `capacity` doubles (may be null when `capacity` is 0);
/// `count_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn nvc_clock_transitions(
    sim: *const NvcSimulation,
    b0_start: f64,
    b0_stop: f64,
    points: usize,
    b0_out: *mut f64,
    capacity: usize,
    count_out: *mut usize,
) -> NvcStatus {
    guard(|| {
        let sim = sim.as_ref().ok_or_else(|| null("sim"))?;
        let count_out = count_out.as_mut().ok_or_else(|| null("count_out"))?;
        *count_out = 0;
        let geometry: FieldGeometry = sim.config.geometry.geometry();
        let grid = lift(linspace(b0_start, b0_stop, points))?;
        let diagram = lift(level_diagram(&sim.env, &sim.cce.core_spins, &geometry, &grid))?;
        let found = lift(find_clock_transitions(&sim.env, &sim.cce.core_spins, &geometry, &diagram))?;
        *count_out = found.len();
        if found.len() > capacity {
            return Err((NvcStatus::BufferTooSmall, format!("{} transitions, capacity {capacity}", found.len())));
        }
        if !found.is_empty() {
            if b0_out.is_null() {
                return Err(null("b0_out"));
            }
            let out = std::slice::from_raw_parts_mut(b0_out, found.len());
            for (slot, ct) in out.iter_mut().zip(&found) {
                *slot = ct.b0;
            }
        }
        Ok(())
    })
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn nvc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nvc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
