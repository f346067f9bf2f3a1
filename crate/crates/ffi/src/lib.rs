// SPDX-License-Identifier: Apache-2.0

//! C ABI over the gwardar simulator.
//!
//! Every function returns a [`GwardarStatus`]. On failure the message is available from
//! [`gwardar_last_error_message`] on the same thread. Strings handed out by this library are
//! owned by the caller and released with [`gwardar_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use gwardar::harness::{generate_topology, run_experiment, GwardarConfig, ScenarioSpec, Simulation, TopologyKind};
use gwardar::Error;

/// Opaque simulation handle.
pub struct GwardarSimulation {
    inner: Simulation,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwardarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    UnknownDevice = 4,
    NoTrustedSnapshot = 5,
    InvalidConfig = 6,
    Internal = 255,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> GwardarStatus {
    match err {
        Error::Parse(_) | Error::Json(_) | Error::Csv(_) => GwardarStatus::ParseError,
        Error::UnknownDevice(_) => GwardarStatus::UnknownDevice,
        Error::NoTrustedSnapshot => GwardarStatus::NoTrustedSnapshot,
        Error::InvalidConfig(_) | Error::InvalidTopology(_) | Error::DisconnectedTopology => GwardarStatus::InvalidConfig,
        _ => GwardarStatus::Internal,
    }
}

struct Failure(GwardarStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GwardarStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GwardarStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            GwardarStatus::Internal
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(GwardarStatus::NullPointer, "null string argument".into()));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(GwardarStatus::InvalidUtf8, e.to_string()))
}

unsafe fn handle<'a>(sim: *mut GwardarSimulation) -> Result<&'a mut GwardarSimulation, Failure> {
    sim.as_mut()
        .ok_or_else(|| Failure(GwardarStatus::NullPointer, "null simulation handle".into()))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(GwardarStatus::NullPointer, "null output pointer".into()));
    }
    out.write(value);
    Ok(())
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|e| Failure(GwardarStatus::Internal, e.to_string()))?;
    write_out(out, c.into_raw())
}

/// Creates a simulation. `topology` is a JSON file path or a generator spec such as
/// `gen:random:54:3`. `config_json` may be NULL for defaults.
///
/// # Safety
/// String arguments must be NUL-terminated or NULL. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_simulation_new(
    topology: *const c_char,
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut GwardarSimulation,
) -> GwardarStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure(GwardarStatus::NullPointer, "null output pointer".into()));
        }
        let kind: TopologyKind = read_str(topology)?.parse()?;
        let config = if config_json.is_null() {
            GwardarConfig::default()
        } else {
            GwardarConfig::from_json(read_str(config_json)?)?
        };
        let topo = generate_topology(&kind, seed, None)?;
        let inner = Simulation::new(topo, config, seed)?;
        write_out(out, Box::into_raw(Box::new(GwardarSimulation { inner })))
    })
}

/// # Safety
/// `sim` must come from [`gwardar_simulation_new`] and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn gwardar_simulation_free(sim: *mut GwardarSimulation) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Runs the learning phase. Writes the number of windows used to `windows` when non-NULL.
///
/// # Safety
/// `sim` must be a live handle. `windows` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_warm_up(sim: *mut GwardarSimulation, windows: *mut usize) -> GwardarStatus {
    guard(|| {
        let report = handle(sim)?.inner.warm_up()?;
        if !windows.is_null() {
            windows.write(report.windows);
        }
        Ok(())
    })
}

/// Advances the simulation by `ticks` time units.
///
/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn gwardar_step(sim: *mut GwardarSimulation, ticks: u64) -> GwardarStatus {
    guard(|| {
        let s = handle(sim)?;
        for _ in 0..ticks {
            s.inner.step()?;
        }
        Ok(())
    })
}

/// Runs one scenario from the current state and keeps the resulting state. `out_json` receives
/// `{"attack": {...}, "verdicts": [...]}`.
///
/// # Safety
/// `sim` must be a live handle, `spec_json` NUL-terminated, `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_run_scenario(
    sim: *mut GwardarSimulation,
    spec_json: *const c_char,
    out_json: *mut *mut c_char,
) -> GwardarStatus {
    guard(|| {
        let s = handle(sim)?;
        let spec = ScenarioSpec::from_json(read_str(spec_json)?)?;
        let spec = ScenarioSpec {
            start_time: spec.start_time.max(s.inner.now()),
            ..spec
        };
        let outcome = run_experiment(&s.inner, &spec)?;
        let body = serde_json::json!({ "attack": outcome.attack, "verdicts": outcome.verdicts });
        s.inner = outcome.simulation;
        write_string(out_json, body.to_string())
    })
}

/// The NOS's claimed view (topology, tables, version) as JSON.
///
/// # Safety
/// `sim` must be a live handle and `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_query_view_json(sim: *mut GwardarSimulation, out_json: *mut *mut c_char) -> GwardarStatus {
    guard(|| {
        let view = handle(sim)?.inner.sdn.controller.query_view();
        let s = serde_json::to_string(&view).map_err(Error::from)?;
        write_string(out_json, s)
    })
}

/// Writes whether the intercepted replica equals the live tables.
///
/// # Safety
/// `sim` must be a live handle and `equal` writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_verify_replica(sim: *mut GwardarSimulation, equal: *mut bool) -> GwardarStatus {
    guard(|| {
        let check = handle(sim)?.inner.verify_replica();
        write_out(equal, check.equal)
    })
}

/// Full restore from the latest trusted snapshot. `report_json` may be NULL.
///
/// # Safety
/// `sim` must be a live handle. `report_json` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_restore(sim: *mut GwardarSimulation, report_json: *mut *mut c_char) -> GwardarStatus {
    guard(|| {
        let report = handle(sim)?.inner.force_restore()?;
        if report_json.is_null() {
            return Ok(());
        }
        let s = serde_json::to_string(&report).map_err(Error::from)?;
        write_string(report_json, s)
    })
}

/// Ends a takeover. `was_active` may be NULL.
///
/// # Safety
/// `sim` must be a live handle. `was_active` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn gwardar_release_takeover(sim: *mut GwardarSimulation, was_active: *mut bool) -> GwardarStatus {
    guard(|| {
        let was = handle(sim)?.inner.release_takeover();
        if !was_active.is_null() {
            was_active.write(was);
        }
        Ok(())
    })
}

/// Message for the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn gwardar_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be a string returned by this library, or NULL.
#[no_mangle]
pub unsafe extern "C" fn gwardar_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
