//! C ABI over `mvfuse`.
//!
//! Objects cross the boundary as opaque handles owned by the caller and released
//! with the matching `*_free`. Every fallible call returns an [`MvfStatus`]; the
//! message of the most recent failure on the calling thread is available from
//! [`mvf_last_error`]. Panics are caught and reported as [`MvfStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mvfuse::config::RunConfig;
use mvfuse::io::{load_scene, save_scene};
use mvfuse::metrics::MetricReport;
use mvfuse::optimizer::{run_tta, TtaConfig, TtaResult};
use mvfuse::prior::synth_head;
use mvfuse::synth::{build_rig, generate_scene, Scene, SceneSpec};
use mvfuse::Error;

/// Status codes. The nonzero values that overlap with the command-line tool's exit
/// codes carry the same meaning.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvfStatus {
    Ok = 0,
    InvalidArgument = 1,
    NumericAbort = 2,
    Io = 3,
    NullPointer = 4,
    NoGroundTruth = 5,
    Panic = 6,
}

/// Loaded or generated scene.
pub struct MvfScene(Scene);

/// Optimization settings.
pub struct MvfConfig(TtaConfig);

/// Outcome of one optimization run.
pub struct MvfResult(TtaResult);

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MvfMetrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub mpvpe: f64,
    pub pck: f64,
    pub auc: f64,
    pub epe: f64,
}

impl From<MetricReport> for MvfMetrics {
    fn from(m: MetricReport) -> Self {
        MvfMetrics { mpjpe: m.mpjpe, pa_mpjpe: m.pa_mpjpe, mpvpe: m.mpvpe, pck: m.pck, auc: m.auc, epe: m.epe }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MvfStatus {
    match e {
        Error::NumericAbort { .. } | Error::NonFinite(_) => MvfStatus::NumericAbort,
        Error::MissingFile(_)
        | Error::Io(_)
        | Error::MalformedHeader(_)
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::ChecksumMismatch { .. }
        | Error::Json(_) => MvfStatus::Io,
        Error::MissingGroundTruth => MvfStatus::NoGroundTruth,
        _ => MvfStatus::InvalidArgument,
    }
}

struct Fail(MvfStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MvfStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, recording any failure as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MvfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvfStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
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
            MvfStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MvfStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread, or null if none. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mvf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Generates a synthetic scene with default noise levels.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mvf_scene_synth(
    seed: u64,
    n_views: usize,
    calibrated: bool,
    out: *mut *mut MvfScene,
) -> MvfStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = build_rig(200, 0)?;
        let head = synth_head(1, 128)?;
        let spec = SceneSpec { seed, n_views, calibrated, ..SceneSpec::default() };
        let scene = generate_scene(&model, &head, &spec)?;
        *out = Box::into_raw(Box::new(MvfScene(scene)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` as for [`mvf_scene_synth`].
#[no_mangle]
pub unsafe extern "C" fn mvf_scene_load(path: *const c_char, out: *mut *mut MvfScene) -> MvfStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MvfScene(load_scene(&path)?)));
        Ok(())
    })
}

/// # Safety
/// `scene` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mvf_scene_save(scene: *const MvfScene, path: *const c_char) -> MvfStatus {
    guard(|| {
        let scene = ref_arg(scene, "scene")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        save_scene(&scene.0, &path)?;
        Ok(())
    })
}

/// Number of views, or 0 for a null handle.
///
/// # Safety
/// `scene` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvf_scene_n_views(scene: *const MvfScene) -> usize {
    scene.as_ref().map_or(0, |s| s.0.n_views())
}

/// # Safety
/// `scene` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvf_scene_free(scene: *mut MvfScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Default settings. Never null.
#[no_mangle]
pub extern "C" fn mvf_config_default() -> *mut MvfConfig {
    Box::into_raw(Box::new(MvfConfig(TtaConfig::default())))
}

/// Parses a TOML run configuration; only its optimization settings are kept.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` as for [`mvf_scene_synth`].
#[no_mangle]
pub unsafe extern "C" fn mvf_config_from_toml(text: *const c_char, out: *mut *mut MvfConfig) -> MvfStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MvfConfig(RunConfig::parse(text)?.tta)));
        Ok(())
    })
}

/// Sets the step count, clamping the warm-up to it.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvf_config_set_steps(config: *mut MvfConfig, steps: usize) -> MvfStatus {
    guard(|| {
        let c = &mut out_arg(config, "config")?.0;
        c.steps = steps;
        c.warmup_steps = c.warmup_steps.min(steps);
        Ok(())
    })
}

/// Sets the per-view and virtual-view learning rates.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvf_config_set_learning_rates(
    config: *mut MvfConfig,
    eta: f64,
    eta_virtual: f64,
) -> MvfStatus {
    guard(|| {
        let c = &mut out_arg(config, "config")?.0;
        let mut next = c.clone();
        next.eta = eta;
        next.eta_virtual = eta_virtual;
        next.validate()?;
        *c = next;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvf_config_free(config: *mut MvfConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs the optimization.
///
/// # Safety
/// `scene` and `config` must be live handles; `out` as for [`mvf_scene_synth`].
#[no_mangle]
pub unsafe extern "C" fn mvf_optimize(
    scene: *const MvfScene,
    config: *const MvfConfig,
    out: *mut *mut MvfResult,
) -> MvfStatus {
    guard(|| {
        let scene = ref_arg(scene, "scene")?;
        let config = ref_arg(config, "config")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(MvfResult(run_tta(&scene.0, &config.0)?)));
        Ok(())
    })
}

/// Number of recorded states (steps + 1), or 0 for a null handle.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mvf_result_n_records(result: *const MvfResult) -> usize {
    result.as_ref().map_or(0, |r| r.0.trace.len())
}

/// Total loss of record `index`.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mvf_result_loss(result: *const MvfResult, index: usize, out: *mut f64) -> MvfStatus {
    guard(|| {
        let r = ref_arg(result, "result")?;
        let out = out_arg(out, "out")?;
        let rec = r.0.trace.get(index).ok_or_else(|| {
            Fail(MvfStatus::InvalidArgument, format!("record {index} out of range ({})", r.0.trace.len()))
        })?;
        *out = rec.total;
        Ok(())
    })
}

/// Metrics of record `index`; [`MvfStatus::NoGroundTruth`] when the scene had none.
///
/// # Safety
/// `result` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mvf_result_metrics(
    result: *const MvfResult,
    index: usize,
    out: *mut MvfMetrics,
) -> MvfStatus {
    guard(|| {
        let r = ref_arg(result, "result")?;
        let out = out_arg(out, "out")?;
        let rec = r.0.trace.get(index).ok_or_else(|| {
            Fail(MvfStatus::InvalidArgument, format!("record {index} out of range ({})", r.0.trace.len()))
        })?;
        *out = rec.metrics.ok_or(Error::MissingGroundTruth)?.into();
        Ok(())
    })
}

/// # Safety
/// `result` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mvf_result_free(result: *mut MvfResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}
