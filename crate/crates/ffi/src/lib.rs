//! C ABI over `qmlib`: quantizer and bound functions on plain arrays, and an
//! opaque handle for running a trained checkpoint.
//!
//! Every fallible function returns a [`QmlStatus`]. On failure the message
//! is available from [`qml_last_error`] on the same thread. Panics are
//! caught at the boundary and reported as [`QmlStatus::Panic`].

use qmlib::autodiff::{Tape, Tensor};
use qmlib::channel::{latency_ms, psnr_to_sigma2, ChannelSpec, SymbolModel};
use qmlib::ibloss::{dkl_star, KlVariant};
use qmlib::model::{Mode, Model};
use qmlib::numerics::Rng;
use qmlib::quantizer::QuantizerSpec;
use qmlib::verify::{gap_bound_constants, true_kl_per_dim};
use qmlib::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Sharpness stored with specs built here; the exported functions only use
/// the hard quantizer and the pmf, which do not depend on it.
const SPEC_GAMMA: f64 = 10.0;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QmlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    OutOfDomain = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    Data = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QmlKlVariant {
    Tight = 0,
    Literal = 1,
}

impl From<QmlKlVariant> for KlVariant {
    fn from(v: QmlKlVariant) -> Self {
        match v {
            QmlKlVariant::Tight => KlVariant::Tight,
            QmlKlVariant::Literal => KlVariant::Literal,
        }
    }
}

/// Trained model loaded from a checkpoint.
pub struct QmlModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QmlStatus {
    match e {
        Error::InvalidArgument(_) | Error::Shape { .. } | Error::Config(_) => QmlStatus::InvalidArgument,
        Error::OutOfDomain(_) => QmlStatus::OutOfDomain,
        Error::Io { .. } => QmlStatus::Io,
        Error::Checkpoint(_) => QmlStatus::Checkpoint,
        Error::NonConvergence { .. } | Error::Divergence { .. } | Error::Gradcheck { .. } => QmlStatus::Numerical,
        Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch { .. } | Error::LabelRange { .. } => {
            QmlStatus::Data
        }
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

/// Runs `f`, records any failure, and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> QmlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            QmlStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            QmlStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            QmlStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or point to `n` writable values.
unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: callers pass either null or a valid, aligned pointer.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

/// # Safety
/// Array arguments must hold `t` values each.
unsafe fn spec(amplitudes: *const f64, breakpoints: *const f64, t: usize) -> Result<QuantizerSpec, Fail> {
    let a = slice(amplitudes, t, "amplitudes")?;
    let b = slice(breakpoints, t, "breakpoints")?;
    Ok(QuantizerSpec::new(a.to_vec(), b.to_vec(), SPEC_GAMMA)?)
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn qml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `10^(-psnr_db / 10)` for unit peak power.
#[no_mangle]
pub extern "C" fn qml_psnr_to_sigma2(psnr_db: f64) -> f64 {
    psnr_to_sigma2(psnr_db)
}

/// Writes the `t + 1` output levels implied by `t` amplitudes.
///
/// # Safety
/// `amplitudes` holds `t` values; `levels` has room for `t + 1`.
#[no_mangle]
pub unsafe extern "C" fn qml_quantizer_levels(amplitudes: *const f64, t: usize, levels: *mut f64) -> QmlStatus {
    guard(|| {
        let a = slice(amplitudes, t, "amplitudes")?;
        let l = qmlib::quantizer::derive_levels(a)?;
        slice_mut(levels, l.len(), "levels")?.copy_from_slice(&l);
        Ok(())
    })
}

/// Step quantizer applied to `n` values.
///
/// # Safety
/// `amplitudes` and `breakpoints` hold `t` values; `z` and `out_values` hold `n`.
#[no_mangle]
pub unsafe extern "C" fn qml_hard_quantize(
    amplitudes: *const f64,
    breakpoints: *const f64,
    t: usize,
    z: *const f64,
    n: usize,
    out_values: *mut f64,
) -> QmlStatus {
    guard(|| {
        let s = spec(amplitudes, breakpoints, t)?;
        let q = s.hard_quantize(slice(z, n, "z")?);
        slice_mut(out_values, n, "out_values")?.copy_from_slice(&q);
        Ok(())
    })
}

/// Level probabilities of `N(mu_i, theta_i²)` for `d` dimensions, row-major
/// `d × (t + 1)`.
///
/// # Safety
/// `mu`, `theta` hold `d` values; `pmf` has room for `d * (t + 1)`.
#[no_mangle]
pub unsafe extern "C" fn qml_conditional_pmf(
    amplitudes: *const f64,
    breakpoints: *const f64,
    t: usize,
    mu: *const f64,
    theta: *const f64,
    d: usize,
    pmf: *mut f64,
) -> QmlStatus {
    guard(|| {
        let s = spec(amplitudes, breakpoints, t)?;
        let p = s.conditional_pmf(slice(mu, d, "mu")?, slice(theta, d, "theta")?)?;
        let dst = slice_mut(pmf, d * (t + 1), "pmf")?;
        for (row, chunk) in p.rows().zip(dst.chunks_mut(t + 1)) {
            chunk.copy_from_slice(row);
        }
        Ok(())
    })
}

/// Closed-form KL upper bound per dimension for a quantized link.
///
/// # Safety
/// `mu`, `theta` and `per_dim` hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn qml_kl_bound(
    amplitudes: *const f64,
    breakpoints: *const f64,
    t: usize,
    mu: *const f64,
    theta: *const f64,
    d: usize,
    sigma2: f64,
    variant: QmlKlVariant,
    per_dim: *mut f64,
) -> QmlStatus {
    guard(|| {
        let s = spec(amplitudes, breakpoints, t)?;
        let p = s.conditional_pmf(slice(mu, d, "mu")?, slice(theta, d, "theta")?)?;
        let b = dkl_star(&p, s.levels(), sigma2, variant.into())?;
        slice_mut(per_dim, d, "per_dim")?.copy_from_slice(&b.per_dim);
        Ok(())
    })
}

/// Quadrature KL of the received mixture per dimension.
///
/// # Safety
/// `mu`, `theta` and `per_dim` hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn qml_true_kl(
    amplitudes: *const f64,
    breakpoints: *const f64,
    t: usize,
    mu: *const f64,
    theta: *const f64,
    d: usize,
    sigma2: f64,
    per_dim: *mut f64,
) -> QmlStatus {
    guard(|| {
        let s = spec(amplitudes, breakpoints, t)?;
        let p = s.conditional_pmf(slice(mu, d, "mu")?, slice(theta, d, "theta")?)?;
        let k = true_kl_per_dim(&p, s.levels(), sigma2)?;
        slice_mut(per_dim, d, "per_dim")?.copy_from_slice(&k);
        Ok(())
    })
}

/// Cap on the total gap between the bound and the true KL of a link.
/// Requires `0 < sigma2 < 1`.
///
/// # Safety
/// `mu` and `theta` hold `d` values.
#[no_mangle]
pub unsafe extern "C" fn qml_gap_bound(
    amplitudes: *const f64,
    breakpoints: *const f64,
    t: usize,
    mu: *const f64,
    theta: *const f64,
    d: usize,
    sigma2: f64,
    bound: *mut f64,
) -> QmlStatus {
    guard(|| {
        let s = spec(amplitudes, breakpoints, t)?;
        let p = s.conditional_pmf(slice(mu, d, "mu")?, slice(theta, d, "theta")?)?;
        *out(bound, "bound")? = gap_bound_constants(&p, s.levels(), sigma2)?.bound;
        Ok(())
    })
}

/// System latency in milliseconds with one symbol per quantized value.
#[no_mangle]
pub extern "C" fn qml_latency_ms(
    d: usize,
    t: usize,
    devices: usize,
    symbol_rate: f64,
    parallel_links: bool,
    latency: *mut f64,
) -> QmlStatus {
    guard(|| {
        let channel = ChannelSpec::from_sigma2(1.0)?.with_symbol_rate(symbol_rate)?;
        let l = latency_ms(d, t, devices, &channel, parallel_links, SymbolModel::PerValue)?;
        *out(latency, "latency")? = l.system_ms;
        Ok(())
    })
}

/// Loads a checkpoint written by `qmlib train`.
///
/// # Safety
/// `path` is a NUL-terminated string; `model` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qml_model_load(path: *const c_char, model: *mut *mut QmlModel) -> QmlStatus {
    guard(|| {
        if path.is_null() {
            return Err(Fail::Null("path"));
        }
        let slot = out(model, "model")?;
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Error::InvalidArgument("path is not UTF-8".into()))?;
        let loaded = Model::load(Path::new(path))?;
        *slot = Box::into_raw(Box::new(QmlModel { model: loaded }));
        Ok(())
    })
}

/// Releases a handle from [`qml_model_load`]. Null is ignored.
///
/// # Safety
/// `model` came from `qml_model_load` and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn qml_model_free(model: *mut QmlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of devices, feature dimension and class count.
///
/// # Safety
/// `model` is a live handle; the outputs are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn qml_model_shape(
    model: *const QmlModel,
    devices: *mut usize,
    feature_dim: *mut usize,
    classes: *mut usize,
) -> QmlStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let c = m.model.config();
        *out(devices, "devices")? = c.devices();
        *out(feature_dim, "feature_dim")? = c.feature_dim;
        *out(classes, "classes")? = c.classes;
        Ok(())
    })
}

/// Input length of device `k`'s view.
///
/// # Safety
/// `model` is a live handle; `width` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qml_model_input_dim(model: *const QmlModel, k: usize, width: *mut usize) -> QmlStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        let dims = &m.model.config().input_dims;
        let w = *dims
            .get(k)
            .ok_or_else(|| Error::InvalidArgument(format!("device {k} of {}", dims.len())))?;
        *out(width, "width")? = w;
        Ok(())
    })
}

/// Class log-probabilities for `batch` samples sent over links at
/// `psnr_db`, with the hard quantizer and channel noise seeded by `seed`.
/// Each input row is the concatenation of all devices' views; the output
/// is row-major `batch × classes`.
///
/// # Safety
/// `model` is a live handle; `inputs` holds `batch` rows of the summed view
/// widths; `log_probs` has room for `batch * classes`.
#[no_mangle]
pub unsafe extern "C" fn qml_model_predict(
    model: *const QmlModel,
    inputs: *const f64,
    batch: usize,
    psnr_db: f64,
    seed: u64,
    log_probs: *mut f64,
) -> QmlStatus {
    guard(|| {
        let m = model.as_ref().ok_or(Fail::Null("model"))?;
        if batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()).into());
        }
        let cfg = m.model.config();
        let width: usize = cfg.input_dims.iter().sum();
        let x = slice(inputs, batch * width, "inputs")?;
        let mut views: Vec<Vec<f64>> = cfg.input_dims.iter().map(|w| Vec::with_capacity(batch * w)).collect();
        for row in x.chunks(width) {
            let mut off = 0;
            for (v, w) in views.iter_mut().zip(&cfg.input_dims) {
                v.extend_from_slice(&row[off..off + w]);
                off += w;
            }
        }
        let tensors = views
            .into_iter()
            .zip(&cfg.input_dims)
            .map(|(v, &w)| Tensor::new(batch, w, v))
            .collect::<qmlib::Result<Vec<_>>>()?;
        let channels = vec![ChannelSpec::from_psnr(psnr_db)?; cfg.devices()];
        let mut tape = Tape::new();
        let vars = m.model.params().bind(&mut tape);
        let result = m
            .model
            .forward(&mut tape, &vars, &tensors, &channels, &mut Rng::new(seed), Mode::Eval, 1)?;
        let lp = tape.value(result.log_probs).data();
        slice_mut(log_probs, lp.len(), "log_probs")?.copy_from_slice(lp);
        Ok(())
    })
}
