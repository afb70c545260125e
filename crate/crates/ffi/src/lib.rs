//! C ABI over leakrb. Objects cross the boundary as opaque handles; inputs
//! and structured outputs are JSON strings. Every call returns an
//! `LrbStatus`; on failure `lrb_last_error` holds a message for the calling
//! thread. Strings returned through `out` pointers belong to the caller and
//! are released with `lrb_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use leakrb::analysis::{analyze, Analysis, AnalysisPlan};
use leakrb::clifford::GateSet;
use leakrb::dataset::RBDataset;
use leakrb::experiment::{heatmap_sweep, SweepSpec};
use leakrb::fit::{fit_model, ModelKind};
use leakrb::noise::{total_error_channel, NoiseModel};
use leakrb::simulate::{run_protocol, DecayCurve, RBProtocolConfig};
use leakrb::space::SpaceLayout;
use leakrb::twirl::{extract_parameters, twirl};
use leakrb::Error;

/// Status codes. 2 and 3 match the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrbStatus {
    Ok = 0,
    NullPointer = 1,
    Invalid = 2,
    Numerical = 3,
    Utf8 = 4,
    Panic = 5,
}

/// A validated RB count dataset.
pub struct LrbDataset {
    inner: RBDataset,
}

/// The result of analyzing a dataset under a plan.
pub struct LrbReport {
    inner: Analysis,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(LrbStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = if e.is_numerical() { LrbStatus::Numerical } else { LrbStatus::Invalid };
        Failure(status, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure(LrbStatus::Invalid, format!("json: {e}"))
    }
}

fn guard<F: FnOnce() -> Result<(), Failure>>(f: F) -> LrbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LrbStatus::Ok,
        Ok(Err(Failure(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())));
            LrbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(LrbStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(LrbStatus::Utf8, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(LrbStatus::NullPointer, format!("{name} is null")))
}

unsafe fn put<T>(out: *mut T, v: T, name: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure(LrbStatus::NullPointer, format!("{name} is null")));
    }
    *out = v;
    Ok(())
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| Failure(LrbStatus::Invalid, "output contains NUL".into()))?;
    put(out, c.into_raw(), "out")
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    Ok(leakrb::io::to_json_rounded(v)?)
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lrb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn lrb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn lrb_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a dataset JSON document.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_dataset_from_json(json: *const c_char, out: *mut *mut LrbDataset) -> LrbStatus {
    guard(|| {
        let ds = RBDataset::from_json_str(str_arg(json, "json")?)?;
        put(out, Box::into_raw(Box::new(LrbDataset { inner: ds })), "out")
    })
}

/// Runs the simulator on an RB protocol configuration JSON.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_dataset_simulate(config_json: *const c_char, out: *mut *mut LrbDataset) -> LrbStatus {
    guard(|| {
        let cfg: RBProtocolConfig = serde_json::from_str(str_arg(config_json, "config_json")?)?;
        let ds = run_protocol(&cfg)?;
        put(out, Box::into_raw(Box::new(LrbDataset { inner: ds })), "out")
    })
}

/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_dataset_to_json(ds: *const LrbDataset, out: *mut *mut c_char) -> LrbStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        put_string(out, to_json(&ds.inner)?)
    })
}

/// Number of circuit records.
///
/// # Safety
/// `ds` must be a live dataset handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_dataset_len(ds: *const LrbDataset, out: *mut usize) -> LrbStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        put(out, ds.inner.circuits.len(), "out")
    })
}

/// # Safety
/// `ds` must come from this library or be NULL; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrb_dataset_free(ds: *mut LrbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Analyzes a dataset under an analysis plan JSON.
///
/// # Safety
/// `ds` must be a live dataset handle, `plan_json` a NUL-terminated string,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_analyze(ds: *const LrbDataset, plan_json: *const c_char, out: *mut *mut LrbReport) -> LrbStatus {
    guard(|| {
        let ds = ref_arg(ds, "ds")?;
        let plan: AnalysisPlan = serde_json::from_str(str_arg(plan_json, "plan_json")?)?;
        let a = analyze(&ds.inner, &plan)?;
        put(out, Box::into_raw(Box::new(LrbReport { inner: a })), "out")
    })
}

/// Looks up a reported quantity ("r", "t", "lambda", "tau", "infidelity",
/// "fidelity", "process_fidelity"). `ci` is NaN when no interval is known.
///
/// # Safety
/// `report` must be a live handle, `name` a NUL-terminated string, `value`
/// and `ci` writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_report_quantity(report: *const LrbReport, name: *const c_char, value: *mut f64, ci: *mut f64) -> LrbStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        let name = str_arg(name, "name")?;
        let q = r.inner.report.quantity(name).ok_or_else(|| Failure(LrbStatus::Invalid, format!("quantity {name:?} not identified by this analysis")))?;
        put(value, q.value, "value")?;
        put(ci, q.ci.unwrap_or(f64::NAN), "ci")
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_report_to_json(report: *const LrbReport, out: *mut *mut c_char) -> LrbStatus {
    guard(|| {
        let r = ref_arg(report, "report")?;
        put_string(out, to_json(&r.inner)?)
    })
}

/// # Safety
/// `report` must come from this library or be NULL; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn lrb_report_free(report: *mut LrbReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Fits one model ("linear", "exponential-plus-floor", ...) to a decay-curve
/// JSON and returns the fit as JSON.
///
/// # Safety
/// `curve_json` and `model` must be NUL-terminated strings; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_fit(curve_json: *const c_char, model: *const c_char, out: *mut *mut c_char) -> LrbStatus {
    guard(|| {
        let curve: DecayCurve = serde_json::from_str(str_arg(curve_json, "curve_json")?)?;
        let model: ModelKind = str_arg(model, "model")?.parse()?;
        put_string(out, to_json(&fit_model(&curve, model)?)?)
    })
}

/// Runs a sweep spec and returns the sweep result as JSON and the CSV table.
/// Either output pointer may be NULL to skip it.
///
/// # Safety
/// `spec_json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lrb_sweep(spec_json: *const c_char, out_json: *mut *mut c_char, out_csv: *mut *mut c_char) -> LrbStatus {
    guard(|| {
        let spec: SweepSpec = serde_json::from_str(str_arg(spec_json, "spec_json")?)?;
        let res = heatmap_sweep(&spec)?;
        if !out_json.is_null() {
            put_string(out_json, to_json(&res)?)?;
        }
        if !out_csv.is_null() {
            put_string(out_csv, res.to_csv()?)?;
        }
        Ok(())
    })
}

/// Leaked-action histograms for a built-in gateset name, as JSON.
///
/// # Safety
/// `gateset` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_gateset_audit(gateset: *const c_char, out: *mut *mut c_char) -> LrbStatus {
    guard(|| {
        let gs = GateSet::builtin(str_arg(gateset, "gateset")?)?;
        let v = leakrb::cli::gateset_audit_value(&gs, leakrb::cli::COMPILE_DEPTH)?;
        put_string(out, to_json(&v)?)
    })
}

/// Twirled two-qubit parameters (r, t) of the default error model.
///
/// # Safety
/// `r` and `t` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lrb_channel_parameters(lambda_s: f64, tau_s: f64, seepage: bool, r: *mut f64, t: *mut f64) -> LrbStatus {
    guard(|| {
        let layout = SpaceLayout::new(2)?;
        let ch = total_error_channel(&NoiseModel::new(lambda_s, tau_s, seepage), &layout)?;
        let p = extract_parameters(&twirl(&ch, leakrb::clifford::clifford_group(2)?)?);
        put(r, p.r, "r")?;
        put(t, p.t, "t")
    })
}

/// Runs the command-line tool in-process with `argc` arguments (argv[0]
/// included) and returns its exit status.
///
/// # Safety
/// `argv` must hold `argc` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn lrb_cli_run(argc: usize, argv: *const *const c_char) -> i32 {
    if argv.is_null() {
        set_error("argv is null".into());
        return LrbStatus::NullPointer as i32;
    }
    let args: Option<Vec<String>> =
        (0..argc).map(|i| (*argv.add(i)).as_ref().and_then(|p| CStr::from_ptr(p).to_str().ok()).map(str::to_owned)).collect();
    match args {
        Some(a) => catch_unwind(|| leakrb::cli::run(a)).unwrap_or(LrbStatus::Panic as i32),
        None => {
            set_error("argv entry is null or not UTF-8".into());
            LrbStatus::Utf8 as i32
        }
    }
}
