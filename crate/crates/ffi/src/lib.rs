//! C ABI over the trajdebug pipeline.
//!
//! Every call returns a `TdStatus`. On failure the message is kept per
//! thread and read with `td_last_error`. Strings handed out by this
//! library must be released with `td_string_free`; handles with their
//! matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use trajdebug::debug::{debug_loop, detect_all, DebugConfig, DebugError};
use trajdebug::env::{EnvError, Environment, GridWorld, WorldSpec};
use trajdebug::eval::{parse_benchmark, EvalError, MetricsReport, Prediction};
use trajdebug::llm::{LlmClient, LlmError, Script};
use trajdebug::Trajectory;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON input or a schema violation.
    Parse = 3,
    /// Bad settings or an input that violates a precondition.
    Config = 4,
    /// Model, judge, or environment failure while running.
    Runtime = 5,
    BudgetExceeded = 6,
    Panic = 7,
}

/// Opaque model client. Usage accumulates across calls.
pub struct TdClient {
    inner: LlmClient,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(TdStatus, String);

impl From<DebugError> for Failure {
    fn from(e: DebugError) -> Self {
        let status = match &e {
            DebugError::Llm(LlmError::BudgetExceeded { .. }) => TdStatus::BudgetExceeded,
            DebugError::Precondition(_) | DebugError::NotFound => TdStatus::Config,
            _ => TdStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let status = match e {
            EvalError::SchemaViolation { .. } | EvalError::Io(_) => TdStatus::Parse,
            _ => TdStatus::Config,
        };
        Failure(status, format!("{}: {e}", e.code()))
    }
}

fn parse_failure(what: &str, e: impl std::fmt::Display) -> Failure {
    Failure(TdStatus::Parse, format!("{what}: {e}"))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TdStatus {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            TdStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(TdStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(TdStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn handle<'a>(p: *const TdClient, name: &str) -> Result<&'a LlmClient, Failure> {
    p.as_ref()
        .map(|c| &c.inner)
        .ok_or_else(|| Failure(TdStatus::NullArgument, format!("{name} is null")))
}

unsafe fn emit(out: *mut *mut c_char, json: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(TdStatus::NullArgument, "out is null".into()));
    }
    *out = CString::new(json).expect("JSON has no nul bytes").into_raw();
    Ok(())
}

/// Last error message on this thread, or null. Owned by the library and
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn td_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn td_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a scripted client from script JSON (the `--script` file format).
///
/// # Safety
/// `script_json` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn td_client_scripted_new(script_json: *const c_char, out: *mut *mut TdClient) -> TdStatus {
    guard(|| {
        let json = text(script_json, "script_json")?;
        if out.is_null() {
            return Err(Failure(TdStatus::NullArgument, "out is null".into()));
        }
        let script = Script::from_json(json).map_err(|e| parse_failure("script", e))?;
        *out = Box::into_raw(Box::new(TdClient {
            inner: LlmClient::scripted(script),
        }));
        Ok(())
    })
}

/// # Safety
/// `client` must be null or a handle from `td_client_scripted_new`, freed once.
#[no_mangle]
pub unsafe extern "C" fn td_client_free(client: *mut TdClient) {
    if !client.is_null() {
        drop(Box::from_raw(client));
    }
}

/// Total tokens this client has spent, or 0 for null.
///
/// # Safety
/// `client` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn td_client_tokens_used(client: *const TdClient) -> u64 {
    client.as_ref().map_or(0, |c| c.inner.usage_report().total())
}

/// Caps the client's total token spend; 0 removes the cap.
///
/// # Safety
/// `client` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn td_client_set_token_budget(client: *const TdClient, tokens: u64) -> TdStatus {
    guard(|| {
        let c = handle(client, "client")?;
        c.arm_budget((tokens > 0).then_some(tokens));
        Ok(())
    })
}

/// Runs per-step, per-module detection. Writes the error profile as JSON.
///
/// # Safety
/// Pointers must be valid; `out` receives a string for `td_string_free`.
#[no_mangle]
pub unsafe extern "C" fn td_detect(
    judge: *const TdClient,
    trajectory_json: *const c_char,
    out: *mut *mut c_char,
) -> TdStatus {
    guard(|| {
        let judge = handle(judge, "judge")?;
        let traj = Trajectory::from_json(text(trajectory_json, "trajectory_json")?)
            .map_err(|e| parse_failure("trajectory", e))?;
        let profile = detect_all(&traj, &DebugConfig::default(), judge)?;
        emit(out, serde_json::to_string_pretty(&profile).expect("result types serialize"))
    })
}

/// Detect, localize, and re-roll a failed grid-world trajectory for up
/// to `budget` attempts (0 means the default). Writes the debug result
/// as JSON.
///
/// # Safety
/// Pointers must be valid; `out` receives a string for `td_string_free`.
#[no_mangle]
pub unsafe extern "C" fn td_debug(
    agent: *const TdClient,
    judge: *const TdClient,
    trajectory_json: *const c_char,
    world_json: *const c_char,
    budget: u32,
    out: *mut *mut c_char,
) -> TdStatus {
    guard(|| {
        let (agent, judge) = (handle(agent, "agent")?, handle(judge, "judge")?);
        let traj = Trajectory::from_json(text(trajectory_json, "trajectory_json")?)
            .map_err(|e| parse_failure("trajectory", e))?;
        let spec = WorldSpec::from_json(text(world_json, "world_json")?).map_err(|e| parse_failure("world", e))?;
        let factory = move || -> Result<Box<dyn Environment>, EnvError> { Ok(Box::new(GridWorld::new(spec.clone())?)) };
        let mut cfg = DebugConfig::default();
        if budget > 0 {
            cfg.budget = budget;
        }
        let result = debug_loop(&traj, &factory, &cfg, judge, agent)?;
        emit(out, serde_json::to_string_pretty(&result).expect("result types serialize"))
    })
}

/// Scores predictions against a benchmark file's contents. `micro`
/// non-zero switches to micro averaging. Writes the metrics report as JSON.
///
/// # Safety
/// Pointers must be valid; `out` receives a string for `td_string_free`.
#[no_mangle]
pub unsafe extern "C" fn td_eval_detection(
    benchmark_json: *const c_char,
    predictions_json: *const c_char,
    micro: i32,
    out: *mut *mut c_char,
) -> TdStatus {
    guard(|| {
        let gold = parse_benchmark(text(benchmark_json, "benchmark_json")?)?;
        let preds: Vec<Prediction> = serde_json::from_str(text(predictions_json, "predictions_json")?)
            .map_err(|e| parse_failure("predictions", e))?;
        let report = MetricsReport::build(&gold, &preds, micro != 0)?;
        emit(out, serde_json::to_string_pretty(&report).expect("result types serialize"))
    })
}
