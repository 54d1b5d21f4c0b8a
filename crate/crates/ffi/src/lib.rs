//! C ABI over `otdg`.
//!
//! Every fallible function returns an [`OtdgStatus`]; on failure the
//! message is available from [`otdg_last_error`] on the same thread.
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use otdg::cli::{self, ExperimentConfig, OtMode};
use otdg::dg::Model;
use otdg::diffmath::Tensor;
use otdg::measures::EmpiricalMeasure;
use otdg::ot::{free_support_barycenter, sinkhorn_divergence, BarycenterOptions, SinkhornOptions};
use otdg::Error;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtdgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Parse = 4,
    Numerical = 5,
    Io = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// A weighted point cloud.
pub struct OtdgCloud {
    inner: EmpiricalMeasure,
}

/// A trained classifier loaded from a model file.
pub struct OtdgModel {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> OtdgStatus {
    match e {
        Error::Config { .. } => OtdgStatus::Config,
        Error::Parse { .. } | Error::Json(_) => OtdgStatus::Parse,
        Error::Io(_) => OtdgStatus::Io,
        Error::InvalidArgument(_) | Error::UnsupportedFamily(_) => OtdgStatus::InvalidArgument,
        _ => OtdgStatus::Numerical,
    }
}

fn guard(f: impl FnOnce() -> Result<(), (OtdgStatus, String)>) -> OtdgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OtdgStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            OtdgStatus::Internal
        }
    }
}

fn lift(e: Error) -> (OtdgStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (OtdgStatus, String) {
    (OtdgStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (OtdgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (OtdgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(
    p: *const f64,
    len: usize,
    what: &str,
) -> Result<&'a [f64], (OtdgStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn otdg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn otdg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a cloud from `n` row-major points of dimension `d`. `weights` may
/// be null for uniform weights; otherwise it holds `n` non-negative values
/// that are normalized.
///
/// # Safety
/// `points` must hold `n*d` doubles, `weights` (if not null) `n` doubles,
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_cloud_new(
    points: *const f64,
    n: usize,
    d: usize,
    weights: *const f64,
    out: *mut *mut OtdgCloud,
) -> OtdgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n
            .checked_mul(d)
            .ok_or((OtdgStatus::InvalidArgument, "n*d overflows".into()))?;
        let pts = Tensor::matrix(n, d, slice(points, len, "points")?.to_vec()).map_err(lift)?;
        let inner = if weights.is_null() {
            EmpiricalMeasure::uniform(pts)
        } else {
            let w = slice(weights, n, "weights")?;
            let total: f64 = w.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err((
                    OtdgStatus::InvalidArgument,
                    "weights must have a positive finite sum".into(),
                ));
            }
            EmpiricalMeasure::new(pts, w.iter().map(|x| x / total).collect())
        }
        .map_err(lift)?;
        *out = Box::into_raw(Box::new(OtdgCloud { inner }));
        Ok(())
    })
}

/// Reads an `x1,...,xd,weight` CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_cloud_load(
    path: *const c_char,
    out: *mut *mut OtdgCloud,
) -> OtdgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = cli::load_point_cloud(&PathBuf::from(c_str(path, "path")?)).map_err(lift)?;
        *out = Box::into_raw(Box::new(OtdgCloud { inner }));
        Ok(())
    })
}

/// # Safety
/// `cloud` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn otdg_cloud_free(cloud: *mut OtdgCloud) {
    if !cloud.is_null() {
        drop(Box::from_raw(cloud));
    }
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otdg_cloud_len(cloud: *const OtdgCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.inner.len())
}

/// Point dimension, or 0 for a null handle.
///
/// # Safety
/// `cloud` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otdg_cloud_dim(cloud: *const OtdgCloud) -> usize {
    cloud.as_ref().map_or(0, |c| c.inner.dim())
}

/// Copies the row-major points into `buf` (`len*dim` doubles) and, when
/// `weights` is not null, the weights into it (`len` doubles).
///
/// # Safety
/// `buf` and `weights` must have room for the copied values.
#[no_mangle]
pub unsafe extern "C" fn otdg_cloud_copy(
    cloud: *const OtdgCloud,
    buf: *mut f64,
    weights: *mut f64,
) -> OtdgStatus {
    guard(|| {
        let c = cloud.as_ref().ok_or_else(|| null("cloud"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let data = c.inner.points().data();
        ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
        if !weights.is_null() {
            let w = c.inner.weights();
            ptr::copy_nonoverlapping(w.as_ptr(), weights, w.len());
        }
        Ok(())
    })
}

/// Debiased Sinkhorn divergence at regularization `eps`.
///
/// # Safety
/// `a`, `b` must be live handles and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_sinkhorn_divergence(
    a: *const OtdgCloud,
    b: *const OtdgCloud,
    eps: f64,
    out: *mut f64,
) -> OtdgStatus {
    guard(|| {
        let (a, b) = (
            a.as_ref().ok_or_else(|| null("a"))?,
            b.as_ref().ok_or_else(|| null("b"))?,
        );
        if out.is_null() {
            return Err(null("out"));
        }
        *out = sinkhorn_divergence(&a.inner, &b.inner, &SinkhornOptions::with_eps(eps))
            .map_err(lift)?;
        Ok(())
    })
}

/// Free-support barycenter with `k` support points (0 picks the largest
/// input size). `weights` may be null for equal weights.
///
/// # Safety
/// `clouds` must hold `count` live handles, `weights` (if not null) `count`
/// doubles, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_barycenter(
    clouds: *const *const OtdgCloud,
    count: usize,
    weights: *const f64,
    k: usize,
    eps: f64,
    seed: u64,
    out: *mut *mut OtdgCloud,
) -> OtdgStatus {
    guard(|| {
        if clouds.is_null() || out.is_null() {
            return Err(null("clouds or out"));
        }
        let handles = std::slice::from_raw_parts(clouds, count);
        let measures = handles
            .iter()
            .map(|h| {
                h.as_ref()
                    .map(|c| c.inner.clone())
                    .ok_or_else(|| null("cloud handle"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let w = if weights.is_null() {
            None
        } else {
            Some(slice(weights, count, "weights")?)
        };
        let k = if k == 0 {
            measures.iter().map(|m| m.len()).max().unwrap_or(1)
        } else {
            k
        };
        let opts = BarycenterOptions {
            k,
            sinkhorn: SinkhornOptions::with_eps(eps),
            seed,
            ..BarycenterOptions::default()
        };
        let res = free_support_barycenter(&measures, w, &opts).map_err(lift)?;
        *out = Box::into_raw(Box::new(OtdgCloud { inner: res.measure }));
        Ok(())
    })
}

/// Loads a model file written by `otdg train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_model_load(
    path: *const c_char,
    out: *mut *mut OtdgModel,
) -> OtdgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = std::fs::File::open(c_str(path, "path")?)
            .map_err(|e| (OtdgStatus::Io, e.to_string()))?;
        let inner = Model::read_from(std::io::BufReader::new(f)).map_err(lift)?;
        *out = Box::into_raw(Box::new(OtdgModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn otdg_model_free(model: *mut OtdgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input dimension expected by the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn otdg_model_input_dim(model: *const OtdgModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.arch.input_dim)
}

/// Predicted class of each of `n` row-major inputs.
///
/// # Safety
/// `x` must hold `n*input_dim` doubles and `labels` room for `n` values.
#[no_mangle]
pub unsafe extern "C" fn otdg_model_predict(
    model: *const OtdgModel,
    x: *const f64,
    n: usize,
    labels: *mut u32,
) -> OtdgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let d = m.inner.arch.input_dim;
        let len = n
            .checked_mul(d)
            .ok_or((OtdgStatus::InvalidArgument, "n*d overflows".into()))?;
        let t = Tensor::matrix(n, d, slice(x, len, "x")?.to_vec()).map_err(lift)?;
        let pred = m.inner.predict(&t).map_err(lift)?;
        for (i, p) in pred.into_iter().enumerate() {
            *labels.add(i) = p as u32;
        }
        Ok(())
    })
}

/// Runs `train`, `loo`, `ablate`, `bounds`, `ot sinkhorn` or
/// `ot barycenter` on an in-memory JSON config, writing artifacts to
/// `out_dir` (null keeps the config's choice). `exit_code` receives the
/// code the command-line tool would return.
///
/// # Safety
/// String arguments must be NUL-terminated (or null where allowed) and
/// `exit_code` writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_run_json(
    command: *const c_char,
    config_json: *const c_char,
    out_dir: *const c_char,
    exit_code: *mut i32,
) -> OtdgStatus {
    guard(|| {
        if exit_code.is_null() {
            return Err(null("exit_code"));
        }
        let cmd = c_str(command, "command")?;
        let mut cfg =
            ExperimentConfig::from_json(c_str(config_json, "config_json")?).map_err(lift)?;
        let out = if out_dir.is_null() {
            None
        } else {
            Some(PathBuf::from(c_str(out_dir, "out_dir")?))
        };
        cfg.resolve(out, None, false);
        cfg.validate().map_err(lift)?;
        let outcome = match cmd {
            "train" => cli::cmd_train(&cfg),
            "loo" => cli::cmd_loo(&cfg),
            "ablate" => cli::cmd_ablate(&cfg),
            "bounds" => cli::cmd_bounds(&cfg),
            "ot sinkhorn" | "ot barycenter" => {
                cfg.ot.mode = if cmd.ends_with("sinkhorn") {
                    OtMode::Sinkhorn
                } else {
                    OtMode::Barycenter
                };
                cli::cmd_ot(&cfg)
            }
            other => {
                return Err((
                    OtdgStatus::InvalidArgument,
                    format!("unknown command '{other}'"),
                ))
            }
        };
        match outcome {
            Ok(o) => {
                *exit_code = o.exit_code;
                Ok(())
            }
            Err(e) => {
                *exit_code = cli::exit_code_for(&e);
                Err(lift(e))
            }
        }
    })
}

/// Runs the bound sweeps for a JSON `SweepConfig` object and returns the
/// outcome as a newly allocated JSON string (free with
/// [`otdg_string_free`]).
///
/// # Safety
/// `sweep_json` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn otdg_bounds_json(
    sweep_json: *const c_char,
    out: *mut *mut c_char,
) -> OtdgStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg: otdg::bounds::SweepConfig = serde_json::from_str(c_str(sweep_json, "sweep_json")?)
            .map_err(|e| (OtdgStatus::Config, e.to_string()))?;
        let outcome = otdg::bounds::run_sweeps(&cfg).map_err(lift)?;
        let text =
            serde_json::to_string(&outcome).map_err(|e| (OtdgStatus::Internal, e.to_string()))?;
        *out = CString::new(text)
            .map_err(|e| (OtdgStatus::Internal, e.to_string()))?
            .into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn otdg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
