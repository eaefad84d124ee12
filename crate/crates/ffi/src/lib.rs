//! C ABI over the polyvis laboratory.
//!
//! Every fallible call returns a [`PolyvisStatus`]; on failure the message is
//! available from [`polyvis_last_error`] on the same thread. Handles are
//! opaque and must be released with their matching `_free` function.
//! Strings handed out by the library are released with [`polyvis_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use polyvis::harness::experiment::ExperimentSummary;
use polyvis::harness::{load_checkpoint, run_experiment, ExperimentConfig};
use polyvis::numerics::Group;
use polyvis::positional::{position_budget, PeScheme};
use polyvis::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolyvisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    InvalidArgument = 4,
    Io = 5,
    Checkpoint = 6,
    Compute = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolyvisPeScheme {
    Original = 0,
    ShareAll = 1,
    ShareByRow = 2,
    ShareByRowCol = 3,
}

impl From<PolyvisPeScheme> for PeScheme {
    fn from(s: PolyvisPeScheme) -> Self {
        match s {
            PolyvisPeScheme::Original => PeScheme::Original,
            PolyvisPeScheme::ShareAll => PeScheme::ShareAll,
            PolyvisPeScheme::ShareByRow => PeScheme::ShareByRow,
            PolyvisPeScheme::ShareByRowCol => PeScheme::ShareByRowCol,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolyvisGroup {
    Expert = 0,
    Fusion = 1,
    Pe = 2,
    Lm = 3,
}

impl From<PolyvisGroup> for Group {
    fn from(g: PolyvisGroup) -> Self {
        match g {
            PolyvisGroup::Expert => Group::Expert,
            PolyvisGroup::Fusion => Group::Fusion,
            PolyvisGroup::Pe => Group::Pe,
            PolyvisGroup::Lm => Group::Lm,
        }
    }
}

/// Token and position accounting for one image and its prompt.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolyvisBudget {
    pub distinct_pe: usize,
    pub vision_tokens: usize,
    pub text_tokens: usize,
    pub total_length: usize,
    pub max_len: usize,
    pub overflow: bool,
    pub ratio: f64,
}

/// Opaque experiment configuration.
pub struct PolyvisConfig(ExperimentConfig);

/// Opaque result of a finished experiment.
pub struct PolyvisRun(Box<ExperimentSummary>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(PolyvisStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let mut root = &e;
        while let Error::Context { source, .. } = root {
            root = source;
        }
        let status = match root {
            Error::Config(_) => PolyvisStatus::InvalidConfig,
            Error::Io(_) => PolyvisStatus::Io,
            Error::Checkpoint(_) => PolyvisStatus::Checkpoint,
            _ => PolyvisStatus::Compute,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(PolyvisStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PolyvisStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PolyvisStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PolyvisStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PolyvisStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

fn owned_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn polyvis_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `s` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn polyvis_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default configuration with the given seed.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_config_default(seed: u64, out: *mut *mut PolyvisConfig) -> PolyvisStatus {
    guard(|| {
        let cfg = Box::new(PolyvisConfig(ExperimentConfig::default_with_seed(seed)));
        put(out, Box::into_raw(cfg), "out")
    })
}

/// Parses and validates a TOML configuration.
///
/// # Safety
/// `toml` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_config_from_toml(toml: *const c_char, out: *mut *mut PolyvisConfig) -> PolyvisStatus {
    guard(|| {
        let text = str_arg(toml, "toml")?;
        let config = ExperimentConfig::parse(text).map_err(|e| Failure::from(Error::from(e)))?;
        put(out, Box::into_raw(Box::new(PolyvisConfig(config))), "out")
    })
}

/// Canonical TOML of `config`; release with `polyvis_string_free`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_config_to_toml(config: *const PolyvisConfig, out: *mut *mut c_char) -> PolyvisStatus {
    guard(|| {
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        put(out, owned_string(config.0.to_toml()), "out")
    })
}

/// # Safety
/// `config` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn polyvis_config_free(config: *mut PolyvisConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Token budget of one image under `config`.
///
/// # Safety
/// `config` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_budget(config: *const PolyvisConfig, out: *mut PolyvisBudget) -> PolyvisStatus {
    guard(|| {
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        let r = polyvis::harness::experiment::budget(&config.0)?;
        let budget = PolyvisBudget {
            distinct_pe: r.distinct_pe,
            vision_tokens: r.vision_tokens,
            text_tokens: r.text_tokens,
            total_length: r.total_length,
            max_len: r.max_len,
            overflow: r.overflow,
            ratio: r.ratio,
        };
        put(out, budget, "out")
    })
}

/// Distinct position vectors needed for segments with the given grids.
///
/// # Safety
/// `rows` and `cols` must each point to `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn polyvis_position_budget(
    scheme: PolyvisPeScheme,
    rows: *const usize,
    cols: *const usize,
    n: usize,
    out: *mut usize,
) -> PolyvisStatus {
    guard(|| {
        if n > 0 && (rows.is_null() || cols.is_null()) {
            return Err(null("rows or cols"));
        }
        let grids: Vec<(usize, usize)> = (0..n).map(|i| (*rows.add(i), *cols.add(i))).collect();
        let count = position_budget(scheme.into(), &grids)
            .map_err(|e| Failure(PolyvisStatus::InvalidArgument, e.to_string()))?;
        put(out, count, "out")
    })
}

/// Trains, evaluates and analyses one experiment, writing its files under
/// `out_dir`.
///
/// # Safety
/// `config` must be a live handle, `out_dir` a NUL-terminated path and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_run_experiment(
    config: *const PolyvisConfig,
    out_dir: *const c_char,
    out: *mut *mut PolyvisRun,
) -> PolyvisStatus {
    guard(|| {
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        let dir = str_arg(out_dir, "out_dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let summary = run_experiment(&config.0, dir)?;
        put(out, Box::into_raw(Box::new(PolyvisRun(Box::new(summary)))), "out")
    })
}

/// Overall eval accuracy of a finished run.
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_run_accuracy(run: *const PolyvisRun, out: *mut f64) -> PolyvisStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        put(out, run.0.trained.eval.accuracy, "out")
    })
}

/// Mean of the last losses of the given phase (1 or 2).
///
/// # Safety
/// `run` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_run_final_loss(run: *const PolyvisRun, phase: u32, out: *mut f64) -> PolyvisStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let report = match phase {
            1 | 2 => &run.0.trained.pipeline.reports[phase as usize - 1],
            _ => return Err(Failure(PolyvisStatus::InvalidArgument, format!("phase {phase} is not 1 or 2"))),
        };
        put(out, report.final_loss, "out")
    })
}

/// # Safety
/// `run` must come from this library or be NULL.
#[no_mangle]
pub unsafe extern "C" fn polyvis_run_free(run: *mut PolyvisRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Hex SHA-256 of one parameter group stored in a checkpoint file; release
/// with `polyvis_string_free`.
///
/// # Safety
/// `path` must be a NUL-terminated path and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn polyvis_checkpoint_digest(
    path: *const c_char,
    group: PolyvisGroup,
    out: *mut *mut c_char,
) -> PolyvisStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = load_checkpoint(path)?;
        let group = Group::from(group);
        let digest = ck
            .hex_digests()
            .remove(&group)
            .ok_or_else(|| Failure(PolyvisStatus::Checkpoint, format!("no {} group in {path}", group.label())))?;
        put(out, owned_string(digest), "out")
    })
}
