//! C ABI over `lll_core`.
//!
//! Every fallible function returns an [`LllStatus`]. On failure the message
//! is available from [`lll_last_error`] on the same thread until the next
//! failing call. Strings returned through `char **` are owned by the caller
//! and must be released with [`lll_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use lll_core::bench::metrics::Metric;
use lll_core::bench::toy::ToyKind;
use lll_core::cli::checkpoint::Checkpoint;
use lll_core::cli::{eval_checkpoint, generate_from};
use lll_core::numcore::Tensor;
use lll_core::{llltrain, rvae, Error};

/// Status codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LllStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Checkpoint = 4,
    Runtime = 5,
    Panic = 6,
}

/// A loaded checkpoint. Create with [`lll_model_load`], release with
/// [`lll_model_free`].
pub struct LllModel {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(LllStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Checkpoint { .. } => LllStatus::Checkpoint,
            Error::Config { .. } | Error::Invalid(_) | Error::UnknownWord(_) | Error::UnknownToken { .. } | Error::Shape { .. } => {
                LllStatus::InvalidArgument
            }
            _ => LllStatus::Runtime,
        };
        Fail(code, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LllStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LllStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            LllStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(LllStatus::NullPointer, format!("`{name}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(LllStatus::InvalidUtf8, format!("`{name}` is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(LllStatus::NullPointer, format!("`{name}` is null")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, name: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(LllStatus::NullPointer, format!("`{name}` is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn task_arg(s: &str) -> Result<ToyKind, Fail> {
    s.parse()
        .map_err(|_| Fail(LllStatus::InvalidArgument, format!("unknown task `{s}`")))
}

fn give_string(s: String, out: &mut *mut c_char) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| Fail(LllStatus::Runtime, "output contains a NUL byte".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failure on this thread; empty if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lll_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lll_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint written by `lll train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lll_model_load(path: *const c_char, out: *mut *mut LllModel) -> LllStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = str_arg(path, "path")?;
        let ck = Checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(LllModel { ck }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from [`lll_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn lll_model_free(m: *mut LllModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// JSON object with the checkpoint's position, digest and configs.
///
/// # Safety
/// `m` must be a live model; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lll_model_info(m: *const LllModel, out: *mut *mut c_char) -> LllStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = m.as_ref().ok_or_else(|| Fail(LllStatus::NullPointer, "`model` is null".into()))?;
        let ck = &m.ck;
        let info = serde_json::json!({
            "stage_label": ck.stage_label,
            "config_digest": ck.config_digest,
            "model": ck.model,
            "adapter": ck.rvae,
            "train": ck.lll,
            "num_parameters": ck.state.params.num_scalars(),
        });
        give_string(info.to_string(), out)
    })
}

/// Test score (0–100) of the model on one toy task, by name.
///
/// # Safety
/// `m` must be a live model; `task` a NUL-terminated string; `score` writable.
#[no_mangle]
pub unsafe extern "C" fn lll_model_eval(m: *const LllModel, task: *const c_char, score: *mut f64) -> LllStatus {
    guard(|| {
        let score = out_arg(score, "score")?;
        let m = m.as_ref().ok_or_else(|| Fail(LllStatus::NullPointer, "`model` is null".into()))?;
        let k = task_arg(str_arg(task, "task")?)?;
        let s = eval_checkpoint(&m.ck, &[k])?;
        *score = s[0].1;
        Ok(())
    })
}

/// Decodes `count` pseudo samples for a task. Writes a JSON object with the
/// samples, their parse status and the correspondence rate (`null` when
/// `count` is 0).
///
/// # Safety
/// `m` must be a live model; `task` a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lll_model_generate(
    m: *const LllModel,
    task: *const c_char,
    count: usize,
    seed: u64,
    out: *mut *mut c_char,
) -> LllStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let m = m.as_ref().ok_or_else(|| Fail(LllStatus::NullPointer, "`model` is null".into()))?;
        let k = task_arg(str_arg(task, "task")?)?;
        let (samples, rate) = generate_from(&m.ck, k, count, seed)?;
        let v = serde_json::json!({ "samples": samples, "correspondence_rate": rate });
        give_string(v.to_string(), out)
    })
}

/// Pseudo samples per earlier task when learning task `t` (1-based) with
/// `d_t` real samples and sampling ratio `gamma`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lll_pseudo_count(gamma: f64, t: usize, d_t: usize, out: *mut usize) -> LllStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = llltrain::pseudo_count(gamma, t, d_t)?;
        Ok(())
    })
}

/// Per-dimension KL of `N(mu, sigma²)` from `N(0, 1)`, averaged over rows.
/// `mu` and `sigma` are row-major `rows × dim`; `out` receives `dim` values.
///
/// # Safety
/// `mu` and `sigma` must hold `rows * dim` values and `out` room for `dim`.
#[no_mangle]
pub unsafe extern "C" fn lll_kl_per_dimension(
    mu: *const f64,
    sigma: *const f64,
    rows: usize,
    dim: usize,
    out: *mut f64,
) -> LllStatus {
    guard(|| {
        let n = rows
            .checked_mul(dim)
            .ok_or_else(|| Fail(LllStatus::InvalidArgument, "rows * dim overflows".into()))?;
        if n == 0 {
            return Err(Fail(LllStatus::InvalidArgument, "rows and dim must be positive".into()));
        }
        let mu = Tensor::new(vec![rows, dim], slice_arg(mu, n, "mu")?.to_vec())?;
        let sigma = Tensor::new(vec![rows, dim], slice_arg(sigma, n, "sigma")?.to_vec())?;
        if out.is_null() {
            return Err(Fail(LllStatus::NullPointer, "`out` is null".into()));
        }
        let kl = rvae::kl_per_dimension(&mu, &sigma)?;
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(kl.data());
        Ok(())
    })
}

/// Free-bits KL `Σᵢ max(rho, klᵢ)` over `d` per-dimension values.
///
/// # Safety
/// `kl` must hold `d` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lll_free_bits_kl(kl: *const f64, d: usize, rho: f64, out: *mut f64) -> LllStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = rvae::free_bits_kl(slice_arg(kl, d, "kl")?, rho);
        Ok(())
    })
}

/// Scores whitespace-tokenized `pred` against `gold` with metric `em` or
/// `nf1`, in `[0, 1]`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lll_score(
    metric: *const c_char,
    pred: *const c_char,
    gold: *const c_char,
    out: *mut f64,
) -> LllStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let metric: Metric = str_arg(metric, "metric")?.parse()?;
        let p: Vec<&str> = str_arg(pred, "pred")?.split_whitespace().collect();
        let g: Vec<&str> = str_arg(gold, "gold")?.split_whitespace().collect();
        *out = metric.score(&p, &g);
        Ok(())
    })
}
