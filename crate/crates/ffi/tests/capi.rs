// SPDX-License-Identifier: Apache-2.0

use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use gwardar_ffi::*;

fn new_sim(spec: &str, seed: u64) -> *mut GwardarSimulation {
    let topo = CString::new(spec).unwrap();
    let cfg = CString::new(r#"{"traffic":{"rate":10},"learning":{"max_warmup_windows":20}}"#).unwrap();
    let mut sim = ptr::null_mut();
    let st = unsafe { gwardar_simulation_new(topo.as_ptr(), cfg.as_ptr(), seed, &mut sim) };
    assert_eq!(st, GwardarStatus::Ok);
    assert!(!sim.is_null());
    sim
}

fn last_error() -> String {
    let p = gwardar_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { gwardar_string_free(p) };
    s
}

#[test]
fn lifecycle_and_scenario() {
    let sim = new_sim("gen:line:4", 3);
    let mut windows = 0usize;
    assert_eq!(unsafe { gwardar_warm_up(sim, &mut windows) }, GwardarStatus::Ok);
    assert!(windows > 0);

    let mut equal = false;
    assert_eq!(unsafe { gwardar_verify_replica(sim, &mut equal) }, GwardarStatus::Ok);
    assert!(equal);

    let spec = CString::new(r#"{"id":"S6","seed":2,"behavior":{"action":"drop"}}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gwardar_run_scenario(sim, spec.as_ptr(), &mut out) }, GwardarStatus::Ok);
    let v: serde_json::Value = serde_json::from_str(&take_string(out)).unwrap();
    assert_eq!(v["attack"]["correct"], true);
    assert_eq!(v["verdicts"][0]["kind"], "malicious_device");

    let mut view = ptr::null_mut();
    assert_eq!(unsafe { gwardar_query_view_json(sim, &mut view) }, GwardarStatus::Ok);
    let view: serde_json::Value = serde_json::from_str(&take_string(view)).unwrap();
    assert!(view["tables"].as_object().is_some_and(|t| !t.is_empty()));

    let mut report = ptr::null_mut();
    assert_eq!(unsafe { gwardar_restore(sim, &mut report) }, GwardarStatus::Ok);
    assert!(take_string(report).contains("snapshot_taken_at"));

    let mut was = true;
    assert_eq!(unsafe { gwardar_release_takeover(sim, &mut was) }, GwardarStatus::Ok);
    assert!(!was);
    assert_eq!(unsafe { gwardar_step(sim, 3) }, GwardarStatus::Ok);
    unsafe { gwardar_simulation_free(sim) };
}

#[test]
fn error_codes() {
    let mut sim = ptr::null_mut();
    let bad = CString::new("gen:line:x").unwrap();
    let st = unsafe { gwardar_simulation_new(bad.as_ptr(), ptr::null(), 0, &mut sim) };
    assert_eq!(st, GwardarStatus::ParseError);
    assert!(sim.is_null());
    assert!(!last_error().is_empty());

    let topo = CString::new("gen:ring:4").unwrap();
    assert_eq!(
        unsafe { gwardar_simulation_new(topo.as_ptr(), ptr::null(), 0, ptr::null_mut()) },
        GwardarStatus::NullPointer
    );
    assert_eq!(
        unsafe { gwardar_simulation_new(ptr::null(), ptr::null(), 0, &mut sim) },
        GwardarStatus::NullPointer
    );
    let not_utf8 = [0xffu8, 0xfe, 0];
    assert_eq!(
        unsafe { gwardar_simulation_new(not_utf8.as_ptr().cast(), ptr::null(), 0, &mut sim) },
        GwardarStatus::InvalidUtf8
    );
    let bad_cfg = CString::new("{").unwrap();
    assert_eq!(
        unsafe { gwardar_simulation_new(topo.as_ptr(), bad_cfg.as_ptr(), 0, &mut sim) },
        GwardarStatus::ParseError
    );
    assert_eq!(unsafe { gwardar_warm_up(ptr::null_mut(), ptr::null_mut()) }, GwardarStatus::NullPointer);

    let sim = new_sim("gen:ring:4", 1);
    let spec = CString::new(r#"{"id":"S9","seed":1}"#).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gwardar_run_scenario(sim, spec.as_ptr(), &mut out) }, GwardarStatus::ParseError);
    assert!(out.is_null());
    // A successful call clears the previous message.
    let mut eq = false;
    assert_eq!(unsafe { gwardar_verify_replica(sim, &mut eq) }, GwardarStatus::Ok);
    assert!(gwardar_last_error_message().is_null());
    unsafe {
        gwardar_simulation_free(sim);
        gwardar_simulation_free(ptr::null_mut());
        gwardar_string_free(ptr::null_mut());
    }
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gwardar.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in [
        "gwardar_simulation_new",
        "gwardar_simulation_free",
        "gwardar_warm_up",
        "gwardar_run_scenario",
        "gwardar_query_view_json",
        "gwardar_verify_replica",
        "gwardar_restore",
        "gwardar_release_takeover",
        "gwardar_last_error_message",
        "gwardar_string_free",
    ] {
        assert!(text.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(text.contains("typedef struct GwardarSimulation GwardarSimulation;"));
    // Only checked when a C compiler is around.
    if let Ok(out) = Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
