//! C ABI over the fidcal core: degradations, restoration, fidelity maps and
//! classifier inference.
//!
//! Every function returns a [`FidcalStatus`]; on failure the message is
//! available from [`fidcal_last_error`] on the same thread. Images are
//! planar `[C, H, W]` `float` buffers in `[0, 1]`. Output buffers may alias
//! the input buffer. Handles are opaque and released with their `_free`
//! function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use fidcal::calibration::Classifier;
use fidcal::degrade::{self, DegradationSpec};
use fidcal::fidelity::{self, FidelityMetric};
use fidcal::imaging::{self, ImageTensor, PreprocessConfig};
use fidcal::restore::{self, Denoiser};
use fidcal::Error;

/// Result code of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidcalStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Internal = 6,
}

/// Per-pixel distance used for fidelity maps.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FidcalMetric {
    L1 = 0,
    L2 = 1,
    Cosine = 2,
}

impl From<FidcalMetric> for FidelityMetric {
    fn from(m: FidcalMetric) -> Self {
        match m {
            FidcalMetric::L1 => FidelityMetric::L1,
            FidcalMetric::L2 => FidelityMetric::L2,
            FidcalMetric::Cosine => FidelityMetric::Cosine,
        }
    }
}

/// Normalization moments of a noise-level mixture.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FidcalMixtureStats {
    /// Variance used for normalization (halved when requested).
    pub sigma_sq: f64,
    pub post_restore_sigma_sq: f64,
    pub half_normal_mean: f64,
    pub half_normal_var: f64,
    pub gamma_mean: f64,
    pub gamma_var: f64,
}

/// Opaque restoration model.
pub struct FidcalDenoiser {
    model: Denoiser,
}

/// Opaque classifier.
pub struct FidcalClassifier {
    model: Classifier,
    prep: PreprocessConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Fail(FidcalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape(_) => FidcalStatus::Shape,
            Error::InvalidArgument(_) | Error::Config(_) | Error::Class { .. } => FidcalStatus::InvalidArgument,
            Error::Io { .. } | Error::Image { .. } | Error::MissingArtifact { .. } => FidcalStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) | Error::BackboneMismatch { .. } | Error::Uninitialized(_) => FidcalStatus::Checkpoint,
            _ => FidcalStatus::Internal,
        };
        Fail(code, e.to_string())
    }
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FidcalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            FidcalStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            FidcalStatus::Internal
        }
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(FidcalStatus::InvalidArgument, msg.into())
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(FidcalStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn elements(dims: &[usize]) -> Result<usize, Fail> {
    if dims.contains(&0) {
        return Err(invalid("dimensions must be positive"));
    }
    dims.iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| invalid("dimensions overflow"))
}

unsafe fn read_image(p: *const f32, c: usize, h: usize, w: usize, what: &str) -> Result<ImageTensor, Fail> {
    non_null(p, what)?;
    let n = elements(&[c, h, w])?;
    let data = std::slice::from_raw_parts(p, n).to_vec();
    Ok(ImageTensor::new(c, h, w, data)?)
}

unsafe fn write_out(out: *mut f32, values: &[f32]) -> Result<(), Fail> {
    non_null(out, "output buffer")?;
    std::ptr::copy(values.as_ptr(), out, values.len());
    Ok(())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fidcal_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fidcal_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Additive white Gaussian noise with standard deviation `sigma`, clipped
/// to `[0, 1]`. The same seed gives the same noise.
///
/// # Safety
/// `img` and `out` must point to `c * h * w` floats.
#[no_mangle]
pub unsafe extern "C" fn fidcal_awgn(img: *const f32, c: usize, h: usize, w: usize, sigma: f64, seed: u64, out: *mut f32) -> FidcalStatus {
    guard(|| {
        let x = read_image(img, c, h, w, "image")?;
        let (y, _) = degrade::awgn(&x, &DegradationSpec::awgn(sigma, seed))?;
        write_out(out, y.data())
    })
}

/// Replaces each element by 0 or 1 with probability `p`.
///
/// # Safety
/// `img` and `out` must point to `c * h * w` floats.
#[no_mangle]
pub unsafe extern "C" fn fidcal_salt_pepper(
    img: *const f32,
    c: usize,
    h: usize,
    w: usize,
    p: f64,
    seed: u64,
    out: *mut f32,
) -> FidcalStatus {
    guard(|| {
        let x = read_image(img, c, h, w, "image")?;
        write_out(out, degrade::salt_pepper(&x, p, seed)?.data())
    })
}

/// Gaussian blur with a 13×13 kernel of standard deviation `sigma`.
///
/// # Safety
/// `img` and `out` must point to `c * h * w` floats.
#[no_mangle]
pub unsafe extern "C" fn fidcal_gaussian_blur(img: *const f32, c: usize, h: usize, w: usize, sigma: f64, out: *mut f32) -> FidcalStatus {
    guard(|| {
        let x = read_image(img, c, h, w, "image")?;
        write_out(out, degrade::gaussian_blur(&x, sigma)?.data())
    })
}

/// PSNR in dB of two `[0, 1]` images; identical images give `+inf`.
///
/// # Safety
/// `a` and `b` must point to `c * h * w` floats, `out` to one double.
#[no_mangle]
pub unsafe extern "C" fn fidcal_psnr(a: *const f32, b: *const f32, c: usize, h: usize, w: usize, out: *mut f64) -> FidcalStatus {
    guard(|| {
        let (x, y) = (read_image(a, c, h, w, "a")?, read_image(b, c, h, w, "b")?);
        non_null(out, "output")?;
        *out = restore::psnr(&x, &y)?;
        Ok(())
    })
}

/// Per-pixel fidelity map (`h * w` floats) of an RGB restored image
/// against its clean reference. With `stats` non-null, ℓ1 and ℓ2 maps are
/// normalized with the mixture moments.
///
/// # Safety
/// `restored` and `clean` must point to `3 * h * w` floats, `out` to
/// `h * w` floats; `stats` may be null.
#[no_mangle]
pub unsafe extern "C" fn fidcal_fidelity(
    restored: *const f32,
    clean: *const f32,
    h: usize,
    w: usize,
    metric: FidcalMetric,
    stats: *const FidcalMixtureStats,
    out: *mut f32,
) -> FidcalStatus {
    guard(|| {
        let r = read_image(restored, 3, h, w, "restored")?;
        let c = read_image(clean, 3, h, w, "clean")?;
        let mut map = fidelity::oracle_fidelity(&r, &c, metric.into())?;
        if let Some(s) = stats.as_ref() {
            let s = fidelity::NoiseMixtureStats {
                sigma_sq: s.sigma_sq,
                post_restore_sigma_sq: s.post_restore_sigma_sq,
                half_normal_mean: s.half_normal_mean,
                half_normal_var: s.half_normal_var,
                gamma_mean: s.gamma_mean,
                gamma_var: s.gamma_var,
            };
            map = fidelity::prepare(&map, &s)?;
        }
        write_out(out, &map.values)
    })
}

/// Moments for the mixture of `n` noise levels.
///
/// # Safety
/// `sigmas` must point to `n` doubles and `out` to one struct.
#[no_mangle]
pub unsafe extern "C" fn fidcal_mixture_stats(
    sigmas: *const f64,
    n: usize,
    restore_halving: bool,
    out: *mut FidcalMixtureStats,
) -> FidcalStatus {
    guard(|| {
        non_null(sigmas, "sigmas")?;
        non_null(out, "output")?;
        let s = fidelity::mixture_stats(std::slice::from_raw_parts(sigmas, n), restore_halving)?;
        *out = FidcalMixtureStats {
            sigma_sq: s.sigma_sq,
            post_restore_sigma_sq: s.post_restore_sigma_sq,
            half_normal_mean: s.half_normal_mean,
            half_normal_var: s.half_normal_var,
            gamma_mean: s.gamma_mean,
            gamma_var: s.gamma_var,
        };
        Ok(())
    })
}

/// Loads a restoration checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fidcal_denoiser_load(path: *const c_char, out: *mut *mut FidcalDenoiser) -> FidcalStatus {
    guard(|| {
        non_null(out, "handle output")?;
        let model = Denoiser::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FidcalDenoiser { model }));
        Ok(())
    })
}

/// Restores one image: `clip(img − predicted noise, 0, 1)`.
///
/// # Safety
/// `handle` must come from [`fidcal_denoiser_load`]; `img` and `out` must
/// point to `c * h * w` floats.
#[no_mangle]
pub unsafe extern "C" fn fidcal_denoiser_run(
    handle: *const FidcalDenoiser,
    img: *const f32,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f32,
) -> FidcalStatus {
    guard(|| {
        let d = handle
            .as_ref()
            .ok_or_else(|| Fail(FidcalStatus::NullPointer, "handle is null".into()))?;
        let x = read_image(img, c, h, w, "image")?;
        write_out(out, restore::denoise(&d.model, &x)?.data())
    })
}

/// # Safety
/// `handle` must come from [`fidcal_denoiser_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fidcal_denoiser_free(handle: *mut FidcalDenoiser) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Loads a classifier checkpoint into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fidcal_classifier_load(path: *const c_char, out: *mut *mut FidcalClassifier) -> FidcalStatus {
    guard(|| {
        non_null(out, "handle output")?;
        let model = Classifier::load(&path_arg(path)?)?;
        let prep = PreprocessConfig::eval(model.cfg.input_size);
        *out = Box::into_raw(Box::new(FidcalClassifier { model, prep }));
        Ok(())
    })
}

/// Number of classes; 0 for a null handle.
///
/// # Safety
/// `handle` must come from [`fidcal_classifier_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fidcal_classifier_num_classes(handle: *const FidcalClassifier) -> usize {
    handle.as_ref().map_or(0, |c| c.model.cfg.num_classes)
}

/// Square input side the classifier expects; 0 for a null handle.
///
/// # Safety
/// `handle` must come from [`fidcal_classifier_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fidcal_classifier_input_size(handle: *const FidcalClassifier) -> usize {
    handle.as_ref().map_or(0, |c| c.model.cfg.input_size)
}

/// Logits for `n` RGB images of the classifier's input size, given in
/// `[0, 1]`; they are mean/std normalized here.
///
/// # Safety
/// `images` must point to `n * 3 * s * s` floats with `s` the input size,
/// `logits` to `n * num_classes` floats.
#[no_mangle]
pub unsafe extern "C" fn fidcal_classifier_predict(
    handle: *const FidcalClassifier,
    images: *const f32,
    n: usize,
    logits: *mut f32,
) -> FidcalStatus {
    guard(|| {
        let c = handle
            .as_ref()
            .ok_or_else(|| Fail(FidcalStatus::NullPointer, "handle is null".into()))?;
        let s = c.model.cfg.input_size;
        non_null(images, "images")?;
        let per = elements(&[3, s, s])?;
        elements(&[n, per])?;
        let imgs = (0..n)
            .map(|i| {
                let x = read_image(images.add(i * per), 3, s, s, "images")?;
                Ok(x.normalize(&c.prep.mean, &c.prep.std)?)
            })
            .collect::<Result<Vec<_>, Fail>>()?;
        let out = c.model.predict(&imaging::batch(&imgs)?);
        write_out(logits, out.data())
    })
}

/// # Safety
/// `handle` must come from [`fidcal_classifier_load`] or be null.
#[no_mangle]
pub unsafe extern "C" fn fidcal_classifier_free(handle: *mut FidcalClassifier) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}
