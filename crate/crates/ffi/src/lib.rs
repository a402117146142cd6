//! C ABI for `cda-core`.
//!
//! Scenarios and machines are opaque handles owned by the caller and
//! released with their `_free` function. Structured results come back as
//! NUL-terminated JSON strings that must be released with
//! [`cda_string_free`]. Every call returns a [`CdaStatus`]; on failure
//! [`cda_last_error`] describes the problem.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cda_core::corpus::bundled_scenario;
use cda_core::exploit::{run_exploit, verify, ExploitChain, ExploitError, ExploitOptions, PocFile};
use cda_core::extract::{build_gadget_db, GadgetDb};
use cda_core::fuzz::{synthesize_report, FuzzConfig};
use cda_core::machine::{MachineConfig, MachineState, Region};
use cda_core::matcher::{extract_pointer_meta, match_gadgets, MatchError};
use cda_core::scenario::{parse_scenario, run_sequence, InputSequence, Scenario};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    Json = 4,
    NotFound = 5,
    NoCorruption = 6,
    SynthesisExhausted = 7,
    ExploitFailed = 8,
    Runtime = 9,
    Panic = 10,
}

/// Parsed scenario.
pub struct CdaScenario(Scenario);

/// Simulated hypervisor process.
pub struct CdaMachine(MachineState);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdaRegion {
    Stack = 0,
    Heap = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Fail(CdaStatus, String);

type Res<T> = Result<T, Fail>;

fn fail(status: CdaStatus, e: impl ToString) -> Fail {
    Fail(status, e.to_string())
}

fn set_error(msg: Option<String>) {
    LAST_ERROR.with(|l| {
        *l.borrow_mut() = msg.map(|m| CString::new(m.replace('\0', " ")).expect("NUL stripped"));
    });
}

fn guard(f: impl FnOnce() -> Res<()>) -> CdaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(None);
            CdaStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(Some(msg));
            status
        }
        Err(_) => {
            set_error(Some("internal panic".into()));
            CdaStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char) -> Res<&'a str> {
    if p.is_null() {
        return Err(fail(CdaStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(CdaStatus::InvalidUtf8, e))
}

unsafe fn handle<'a, T>(p: *const T) -> Res<&'a T> {
    p.as_ref().ok_or_else(|| fail(CdaStatus::NullArgument, "null handle"))
}

unsafe fn put<T>(out: *mut T, value: T) -> Res<()> {
    if out.is_null() {
        return Err(fail(CdaStatus::NullArgument, "null output pointer"));
    }
    out.write(value);
    Ok(())
}

unsafe fn put_json(out: *mut *mut c_char, value: &impl serde::Serialize) -> Res<()> {
    let s = serde_json::to_string(value).map_err(|e| fail(CdaStatus::Json, e))?;
    put(out, CString::new(s).expect("JSON has no NUL").into_raw())
}

fn poc(json: &str) -> Res<InputSequence> {
    PocFile::from_json(json)
        .map(|p| p.actions)
        .map_err(|e| fail(CdaStatus::Json, e))
}

fn exploit_status(e: &ExploitError) -> CdaStatus {
    match e {
        ExploitError::NoCorruption | ExploitError::Match(MatchError::NoCorruption) => CdaStatus::NoCorruption,
        ExploitError::SynthesisExhausted => CdaStatus::SynthesisExhausted,
        ExploitError::UnknownGadget(_) => CdaStatus::NotFound,
        ExploitError::NoPairedGadget | ExploitError::Match(_) => CdaStatus::ExploitFailed,
        _ => CdaStatus::Runtime,
    }
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call on the same thread.
#[no_mangle]
pub extern "C" fn cda_last_error() -> *const c_char {
    LAST_ERROR.with(|l| l.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn cda_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn cda_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `source` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_scenario_parse(source: *const c_char, out: *mut *mut CdaScenario) -> CdaStatus {
    guard(|| {
        let s = parse_scenario(text(source)?).map_err(|e| fail(CdaStatus::Parse, e))?;
        put(out, Box::into_raw(Box::new(CdaScenario(s))))
    })
}

/// Loads one of the scenarios shipped with the library by name.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_scenario_bundled(name: *const c_char, out: *mut *mut CdaScenario) -> CdaStatus {
    guard(|| {
        let name = text(name)?;
        let b =
            bundled_scenario(name).ok_or_else(|| fail(CdaStatus::NotFound, format!("no bundled scenario `{name}`")))?;
        put(out, Box::into_raw(Box::new(CdaScenario(b.scenario()))))
    })
}

/// Canonical text of a scenario.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_scenario_print(s: *const CdaScenario, out: *mut *mut c_char) -> CdaStatus {
    guard(|| {
        let text = cda_core::scenario::print_scenario(&handle(s)?.0);
        put(out, CString::new(text).expect("scenario text has no NUL").into_raw())
    })
}

/// # Safety
/// `s` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cda_scenario_free(s: *mut CdaScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Gadget database as JSON.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_extract(s: *const CdaScenario, out: *mut *mut c_char) -> CdaStatus {
    guard(|| put_json(out, &build_gadget_db(&handle(s)?.0)))
}

/// Ranked matches of `db_json` against the pointer `poc_json` corrupts.
///
/// # Safety
/// Strings must be NUL-terminated; `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_match(
    s: *const CdaScenario,
    db_json: *const c_char,
    poc_json: *const c_char,
    seed: u64,
    out: *mut *mut c_char,
) -> CdaStatus {
    guard(|| {
        let s = &handle(s)?.0;
        let db = GadgetDb::from_json(text(db_json)?).map_err(|e| fail(CdaStatus::Json, e))?;
        let poc = poc(text(poc_json)?)?;
        let mut m = MachineConfig::with_seed(seed)
            .build()
            .map_err(|e| fail(CdaStatus::Runtime, e))?;
        let trace = run_sequence(&mut m, s, &poc.actions, None).map_err(|e| fail(CdaStatus::Runtime, e))?;
        let meta = extract_pointer_meta(&trace, s).map_err(|e| match e {
            MatchError::NoCorruption => fail(CdaStatus::NoCorruption, e),
            _ => fail(CdaStatus::Runtime, e),
        })?;
        put_json(out, &match_gadgets(&db, &meta))
    })
}

/// Input sequence reaching `gadget_id`, or `CDA_STATUS_SYNTHESIS_EXHAUSTED`.
///
/// # Safety
/// `gadget_id` must be NUL-terminated; `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_synthesize(
    s: *const CdaScenario,
    gadget_id: *const c_char,
    seed: u64,
    budget: u64,
    out: *mut *mut c_char,
) -> CdaStatus {
    guard(|| {
        let s = &handle(s)?.0;
        let id = text(gadget_id)?;
        let db = build_gadget_db(s);
        let g = db
            .get(id)
            .ok_or_else(|| fail(CdaStatus::NotFound, format!("unknown gadget `{id}`")))?;
        let cfg = FuzzConfig {
            budget,
            ..FuzzConfig::with_seed(seed)
        };
        let report = synthesize_report(s, g, &cfg).map_err(|e| fail(CdaStatus::Runtime, e))?;
        let input = report.input.ok_or_else(|| {
            fail(
                CdaStatus::SynthesisExhausted,
                format!("no input reached {id} within {} iterations", report.iterations),
            )
        })?;
        put_json(out, &input)
    })
}

/// Full pipeline. The outcome JSON is written whenever a chain was
/// assembled, including when verification found no expected variant
/// (`CDA_STATUS_EXPLOIT_FAILED`).
///
/// # Safety
/// `poc_json` must be NUL-terminated; `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_exploit(
    s: *const CdaScenario,
    poc_json: *const c_char,
    seed: u64,
    out: *mut *mut c_char,
) -> CdaStatus {
    guard(|| {
        let s = &handle(s)?.0;
        let poc = poc(text(poc_json)?)?;
        let outcome =
            run_exploit(s, &poc, &ExploitOptions::with_seed(seed)).map_err(|e| fail(exploit_status(&e), e))?;
        put_json(out, &outcome)?;
        if outcome.report.success {
            Ok(())
        } else {
            Err(fail(
                CdaStatus::ExploitFailed,
                "chain verified without any expected variant",
            ))
        }
    })
}

/// Re-verifies a chain (bare, or the `chain` member of an outcome).
///
/// # Safety
/// `chain_json` must be NUL-terminated; `s` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_verify(
    s: *const CdaScenario,
    chain_json: *const c_char,
    seed: u64,
    out: *mut *mut c_char,
) -> CdaStatus {
    guard(|| {
        let s = &handle(s)?.0;
        let mut value: serde_json::Value =
            serde_json::from_str(text(chain_json)?).map_err(|e| fail(CdaStatus::Json, e))?;
        if let Some(inner) = value.get_mut("chain") {
            value = inner.take();
        }
        let chain: ExploitChain = serde_json::from_value(value).map_err(|e| fail(CdaStatus::Json, e))?;
        let report = verify(s, &chain, &MachineConfig::with_seed(seed)).map_err(|e| fail(exploit_status(&e), e))?;
        put_json(out, &report)?;
        if report.success {
            Ok(())
        } else {
            Err(fail(
                CdaStatus::ExploitFailed,
                "chain verified without any expected variant",
            ))
        }
    })
}

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cda_machine_new(
    guest_size: u64,
    heap_size: u64,
    seed: u64,
    out: *mut *mut CdaMachine,
) -> CdaStatus {
    guard(|| {
        let m = MachineConfig {
            guest_size,
            heap_size,
            seed,
        }
        .build()
        .map_err(|e| fail(CdaStatus::Runtime, e))?;
        put(out, Box::into_raw(Box::new(CdaMachine(m))))
    })
}

/// # Safety
/// `m` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cda_machine_free(m: *mut CdaMachine) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Runs an input sequence on the machine and returns its trace. Machine
/// state carries over between calls.
///
/// # Safety
/// `input_json` must be NUL-terminated; handles live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_machine_run(
    m: *mut CdaMachine,
    s: *const CdaScenario,
    input_json: *const c_char,
    out: *mut *mut c_char,
) -> CdaStatus {
    guard(|| {
        let s = &handle(s)?.0;
        let input = poc(text(input_json)?)?;
        let m = &mut m
            .as_mut()
            .ok_or_else(|| fail(CdaStatus::NullArgument, "null handle"))?
            .0;
        let trace = run_sequence(m, s, &input.actions, None).map_err(|e| fail(CdaStatus::Runtime, e))?;
        put_json(out, &trace)
    })
}

/// Every word in `region` that currently holds a guest address.
///
/// # Safety
/// `m` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_machine_residues(
    m: *const CdaMachine,
    region: CdaRegion,
    out: *mut *mut c_char,
) -> CdaStatus {
    guard(|| {
        let region = match region {
            CdaRegion::Stack => Region::Stack,
            CdaRegion::Heap => Region::Heap,
        };
        put_json(out, &handle(m)?.0.snapshot_residues(region))
    })
}

/// Textual dump of the machine with the deepest `top_slots` stack slots.
///
/// # Safety
/// `m` live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cda_machine_dump(m: *const CdaMachine, top_slots: usize, out: *mut *mut c_char) -> CdaStatus {
    guard(|| {
        let dump = handle(m)?.0.dump(top_slots);
        put(out, CString::new(dump).expect("dump has no NUL").into_raw())
    })
}
