//! C ABI over the `ecgattr` library.
//!
//! Networks are opaque handles created by `ecg_network_load` or
//! `ecg_network_build` and released with `ecg_network_free`. Every fallible call
//! returns an `EcgStatus`; on failure the message is kept per thread and can be
//! read with `ecg_last_error_message`. Signals passed in are in model space,
//! i.e. already standardized (see `ecg_standardize`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ecgattr::attribution::{attribute, MethodId, MethodParams, SignMode};
use ecgattr::engine::{load_checkpoint, Network};
use ecgattr::metrics::{degradation_pair, degradation_score, localization_score, GroundTruthSet};
use ecgattr::model::{build_network, predict, standardize, NetworkConfig};
use ecgattr::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcgStatus {
    Ok = 0,
    NullPointer = 1,
    Usage = 2,
    Config = 3,
    Input = 4,
    Load = 5,
    Io = 6,
    Training = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EcgSignMode {
    Raw = 0,
    Absolute = 1,
}

/// Opaque network handle. Holds an inference network with batch norm folded.
pub struct EcgNetwork {
    net: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn set_last_error(msg: String) {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn status_of(e: &Error) -> EcgStatus {
    match e.category() {
        "usage" => EcgStatus::Usage,
        "config" => EcgStatus::Config,
        "input" => EcgStatus::Input,
        "load" => EcgStatus::Load,
        "io" => EcgStatus::Io,
        "training" => EcgStatus::Training,
        _ => EcgStatus::Input,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EcgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error(String::new());
            EcgStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(format!("null pointer: {what}"));
            EcgStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic".into());
            EcgStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Core(Error::Input(format!("{what} is not valid UTF-8"))))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut_arg<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn net_arg<'a>(p: *const EcgNetwork) -> Result<&'a Network, Failure> {
    p.as_ref().map(|h| &h.net).ok_or(Failure::Null("network"))
}

fn check_out_len(have: usize, need: usize, what: &str) -> Result<(), Failure> {
    if have < need {
        return Err(Error::Input(format!("{what} buffer holds {have} values, {need} needed")).into());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ecg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Byte length of the calling thread's last error message (0 after success).
#[no_mangle]
pub extern "C" fn ecg_last_error_length() -> usize {
    LAST_ERROR.with(|slot| slot.borrow().len())
}

/// Copies the last error message, truncated to `capacity - 1` bytes and
/// NUL-terminated. Returns the number of bytes copied, excluding the NUL.
///
/// # Safety
/// `buffer` must be valid for `capacity` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn ecg_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    if buffer.is_null() || capacity == 0 {
        return 0;
    }
    LAST_ERROR.with(|slot| {
        let msg = slot.borrow();
        let n = msg.len().min(capacity - 1);
        std::ptr::copy_nonoverlapping(msg.as_ptr(), buffer.cast::<u8>(), n);
        *buffer.add(n) = 0;
        n
    })
}

/// Loads a checkpoint directory and folds its batch norm layers.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ecg_network_load(dir: *const c_char, out: *mut *mut EcgNetwork) -> EcgStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let net = load_checkpoint(Path::new(dir))?.fold_batchnorm();
        *out = Box::into_raw(Box::new(EcgNetwork { net }));
        Ok(())
    })
}

/// Builds a freshly initialized network from a preset (`desk` or `paper`).
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn ecg_network_build(preset: *const c_char, seed: u64, out: *mut *mut EcgNetwork) -> EcgStatus {
    guard(|| {
        let preset = str_arg(preset, "preset")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let net = build_network(&NetworkConfig::preset(preset)?, seed)?.fold_batchnorm();
        *out = Box::into_raw(Box::new(EcgNetwork { net }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ecg_network_free(net: *mut EcgNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Expected signal length, or 0 for a null handle.
///
/// # Safety
/// `net` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ecg_network_input_length(net: *const EcgNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.input_length())
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `net` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn ecg_network_num_classes(net: *const EcgNetwork) -> usize {
    net.as_ref().map_or(0, |h| h.net.num_outputs())
}

/// Zero-mean, unit-variance copy of `signal` into `out` (both `len` values).
///
/// # Safety
/// `signal` and `out` must be valid for `len` values.
#[no_mangle]
pub unsafe extern "C" fn ecg_standardize(signal: *const f32, len: usize, out: *mut f32) -> EcgStatus {
    guard(|| {
        let x = slice_arg(signal, len, "signal")?;
        let out = slice_mut_arg(out, len, "out")?;
        out.copy_from_slice(&standardize(x)?);
        Ok(())
    })
}

/// Class probabilities of one signal.
///
/// # Safety
/// `signal` must be valid for `len` values and `probs` for `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn ecg_predict(
    net: *const EcgNetwork,
    signal: *const f32,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> EcgStatus {
    guard(|| {
        let net = net_arg(net)?;
        let x = slice_arg(signal, len, "signal")?;
        let p = predict(net, x)?;
        check_out_len(probs_len, p.len(), "probability")?;
        slice_mut_arg(probs, p.len(), "probs")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Attribution map of the predicted class. `method` is a method name such as
/// `"GradCAM"`. `backgrounds` holds `n_backgrounds` signals of `len` values
/// each and is only read by DeepSHAP. The explained class is written to
/// `target` when it is non-null.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `backgrounds` may be null
/// when `n_backgrounds` is 0.
#[no_mangle]
pub unsafe extern "C" fn ecg_attribute(
    net: *const EcgNetwork,
    signal: *const f32,
    len: usize,
    method: *const c_char,
    sign_mode: EcgSignMode,
    seed: u64,
    example_id: usize,
    backgrounds: *const f32,
    n_backgrounds: usize,
    out: *mut f32,
    out_len: usize,
    target: *mut usize,
) -> EcgStatus {
    guard(|| {
        let net = net_arg(net)?;
        let x = slice_arg(signal, len, "signal")?;
        let method: MethodId = str_arg(method, "method")?.parse()?;
        let pool: Vec<Vec<f32>> = if n_backgrounds == 0 {
            Vec::new()
        } else {
            slice_arg(backgrounds, n_backgrounds * len, "backgrounds")?.chunks(len).map(<[f32]>::to_vec).collect()
        };
        let sign_mode = match sign_mode {
            EcgSignMode::Raw => SignMode::Raw,
            EcgSignMode::Absolute => SignMode::Absolute,
        };
        let params = MethodParams { seed, ..MethodParams::default() };
        let map = attribute(net, example_id, x, method, &params, sign_mode, &pool)?;
        check_out_len(out_len, map.values.len(), "attribution")?;
        slice_mut_arg(out, map.values.len(), "out")?.copy_from_slice(&map.values);
        if !target.is_null() {
            *target = map.target_class;
        }
        Ok(())
    })
}

/// Localization score of `attr` against the ground-truth sample indices.
///
/// # Safety
/// `attr` must be valid for `len` values, `gt` for `n_gt`, `out` for one write.
#[no_mangle]
pub unsafe extern "C" fn ecg_localization_score(
    attr: *const f32,
    len: usize,
    gt: *const usize,
    n_gt: usize,
    out: *mut f64,
) -> EcgStatus {
    guard(|| {
        let attr = slice_arg(attr, len, "attr")?;
        let gt = GroundTruthSet::new(slice_arg(gt, n_gt, "gt")?.to_vec(), len)?;
        let score = localization_score(attr, &gt)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = score;
        Ok(())
    })
}

/// Degradation score of `attr` for class `target`. `skipped` receives 1 when
/// `|p_0 - p_N| < min_gap` (the score is then 0), else 0.
///
/// # Safety
/// `signal` and `attr` must be valid for `len` values; `score` and `skipped`
/// for one write each.
#[no_mangle]
pub unsafe extern "C" fn ecg_degradation_score(
    net: *const EcgNetwork,
    signal: *const f32,
    attr: *const f32,
    len: usize,
    target: usize,
    window: usize,
    min_gap: f64,
    score: *mut f64,
    skipped: *mut i32,
) -> EcgStatus {
    guard(|| {
        let net = net_arg(net)?;
        let x = slice_arg(signal, len, "signal")?;
        let a = slice_arg(attr, len, "attr")?;
        if target >= net.num_outputs() {
            return Err(Error::Input(format!("target class {target} out of range")).into());
        }
        let score = score.as_mut().ok_or(Failure::Null("score"))?;
        let skipped = skipped.as_mut().ok_or(Failure::Null("skipped"))?;
        match degradation_pair(net, x, target, a, window, min_gap)? {
            Some((morf, lerf)) => {
                *score = degradation_score(&morf, &lerf)?;
                *skipped = 0;
            }
            None => {
                *score = 0.0;
                *skipped = 1;
            }
        }
        Ok(())
    })
}
