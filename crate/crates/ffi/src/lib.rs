//! C interface to `mccsr`.
//!
//! Objects are opaque handles created by `mccsr_*` constructors and released
//! with the matching `*_free` function. Every fallible call returns an
//! [`MccsrStatus`]; on failure [`mccsr_last_error_message`] describes the
//! problem for the calling thread. Panics never cross the boundary.
//!
//! The header `include/mccsr.h` is generated from this file at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use mccsr::dictionary::{joint_dictionary_learning, DictionaryPair, TrainConfig};
use mccsr::image::{PlanarImage, FEATURE_MAPS};
use mccsr::metrics::evaluate;
use mccsr::operators::build_edge_operator;
use mccsr::pipeline::{build_training_set, degrade, super_resolve, SrConfig, TrainingSetConfig};
use mccsr::synthetic::add_gaussian_noise;
use mccsr::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MccsrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Format = 4,
    Io = 5,
    InsufficientData = 6,
    Panic = 7,
}

/// A trained LR/HR dictionary pair.
pub struct MccsrDictionary(DictionaryPair);

/// An RGB image with samples in `[0, 255]`.
pub struct MccsrImage(PlanarImage);

/// Super-resolution settings. Start from [`mccsr_sr_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MccsrSrOptions {
    /// 0 uses the dictionary's scale.
    pub scale: u32,
    pub lambda: f64,
    pub tau_max: f64,
    /// Input noise σ; values ≤ 0 mean a clean input.
    pub noise_sigma: f64,
    /// τ used for every patch; negative values keep the adaptive map.
    pub force_tau: f64,
}

/// Dictionary training settings. Start from [`mccsr_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MccsrTrainOptions {
    pub scale: u32,
    pub atoms: u32,
    pub samples: u32,
    pub outer_iterations: u32,
    pub lambda: f64,
    pub tau: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MccsrMetrics {
    pub psnr_db: f64,
    pub ssim: f64,
    pub scielab_total: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MccsrStatus {
    match e {
        Error::ColorSpace { .. } | Error::Dimension(_) => MccsrStatus::Dimension,
        Error::InvalidParameter(_) | Error::Config(_) => MccsrStatus::InvalidArgument,
        Error::InsufficientPatches { .. } => MccsrStatus::InsufficientData,
        Error::Format(_) => MccsrStatus::Format,
        Error::Io(_) | Error::Image(_) => MccsrStatus::Io,
    }
}

struct Failure(MccsrStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MccsrStatus::NullPointer, format!("{what} is NULL"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MccsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            MccsrStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_last_error(&format!("internal error: {msg}"));
            MccsrStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MccsrStatus::InvalidArgument, format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next `mccsr_*` call on the same thread.
#[no_mangle]
pub extern "C" fn mccsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mccsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_dictionary_load(path: *const c_char, out: *mut *mut MccsrDictionary) -> MccsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        store(out, MccsrDictionary(DictionaryPair::load(path)?));
        Ok(())
    })
}

/// # Safety
/// `dict` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mccsr_dictionary_save(dict: *const MccsrDictionary, path: *const c_char) -> MccsrStatus {
    guard(|| {
        let dict = dict.as_ref().ok_or_else(|| null("dict"))?;
        dict.0.save(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Atoms per channel, or 0 for NULL.
///
/// # Safety
/// `dict` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mccsr_dictionary_atoms(dict: *const MccsrDictionary) -> usize {
    dict.as_ref().map_or(0, |d| d.0.atoms())
}

/// Upscaling factor the dictionary was trained for, or 0 for NULL.
///
/// # Safety
/// `dict` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mccsr_dictionary_scale(dict: *const MccsrDictionary) -> u32 {
    dict.as_ref().map_or(0, |d| d.0.scale as u32)
}

/// # Safety
/// `dict` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mccsr_dictionary_free(dict: *mut MccsrDictionary) {
    if !dict.is_null() {
        drop(Box::from_raw(dict));
    }
}

#[no_mangle]
pub extern "C" fn mccsr_train_options_default() -> MccsrTrainOptions {
    let t = TrainConfig::default();
    let s = TrainingSetConfig::default();
    MccsrTrainOptions {
        scale: s.scale as u32,
        atoms: t.atoms as u32,
        samples: s.samples as u32,
        outer_iterations: t.outer_iterations as u32,
        lambda: t.lambda,
        tau: t.tau,
        seed: t.seed,
    }
}

/// Learns a dictionary from `count` high-resolution training images.
///
/// # Safety
/// `images` must point to `count` valid image handles; `options` may be NULL
/// for the defaults; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_train(
    images: *const *const MccsrImage,
    count: usize,
    options: *const MccsrTrainOptions,
    out: *mut *mut MccsrDictionary,
) -> MccsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if images.is_null() {
            return Err(null("images"));
        }
        let handles = std::slice::from_raw_parts(images, count);
        let hr: Vec<PlanarImage> = handles
            .iter()
            .map(|&h| h.as_ref().map(|h| h.0.clone()).ok_or_else(|| null("image handle")))
            .collect::<Result<_, _>>()?;
        let o = options.as_ref().copied().unwrap_or_else(|| mccsr_train_options_default());
        let set_cfg = TrainingSetConfig { scale: o.scale as usize, samples: o.samples as usize, seed: o.seed, ..Default::default() };
        let cfg = TrainConfig {
            atoms: o.atoms as usize,
            lambda: o.lambda,
            tau: o.tau,
            outer_iterations: o.outer_iterations as usize,
            seed: o.seed,
            ..Default::default()
        };
        let ts = build_training_set(&hr, &set_cfg)?;
        let s = build_edge_operator(set_cfg.patch_side)?;
        let outcome = joint_dictionary_learning(&ts, &s, &cfg)?;
        let pair = DictionaryPair::new(outcome.dl, outcome.dh, set_cfg.patch_side, set_cfg.scale, FEATURE_MAPS)?;
        store(out, MccsrDictionary(pair));
        Ok(())
    })
}

/// Builds an image from interleaved 8-bit RGB, `width * height * 3` bytes.
///
/// # Safety
/// `data` must point to `len` readable bytes; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_from_rgb8(
    width: usize,
    height: usize,
    data: *const u8,
    len: usize,
    out: *mut *mut MccsrImage,
) -> MccsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() {
            return Err(null("data"));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        store(out, MccsrImage(PlanarImage::from_rgb8(width, height, bytes)?));
        Ok(())
    })
}

/// Writes the image as interleaved 8-bit RGB (rounded and clamped) into
/// `buf`, which must hold `width * height * 3` bytes.
///
/// # Safety
/// `img` must come from this library; `buf` must point to `len` writable
/// bytes.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_to_rgb8(img: *const MccsrImage, buf: *mut u8, len: usize) -> MccsrStatus {
    guard(|| {
        let img = img.as_ref().ok_or_else(|| null("img"))?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let bytes = img.0.to_rgb8()?;
        if len != bytes.len() {
            return Err(Failure(MccsrStatus::Dimension, format!("buffer holds {len} bytes, image needs {}", bytes.len())));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_read_png(path: *const c_char, out: *mut *mut MccsrImage) -> MccsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        store(out, MccsrImage(PlanarImage::read_png(path_arg(path, "path")?)?));
        Ok(())
    })
}

/// # Safety
/// `img` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_write_png(img: *const MccsrImage, path: *const c_char) -> MccsrStatus {
    guard(|| {
        let img = img.as_ref().ok_or_else(|| null("img"))?;
        img.0.write_png(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `img` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_width(img: *const MccsrImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.width())
}

/// # Safety
/// `img` must be NULL or come from this library.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_height(img: *const MccsrImage) -> usize {
    img.as_ref().map_or(0, |i| i.0.height())
}

/// # Safety
/// `img` must be NULL or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn mccsr_image_free(img: *mut MccsrImage) {
    if !img.is_null() {
        drop(Box::from_raw(img));
    }
}

#[no_mangle]
pub extern "C" fn mccsr_sr_options_default() -> MccsrSrOptions {
    let d = SrConfig::default();
    MccsrSrOptions { scale: 0, lambda: d.lambda, tau_max: d.tau_map.tau_max, noise_sigma: 0.0, force_tau: -1.0 }
}

/// Super-resolves `lr` into a new image stored in `*out`.
///
/// # Safety
/// `dict` and `lr` must come from this library; `options` may be NULL for
/// the defaults; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_super_resolve(
    dict: *const MccsrDictionary,
    lr: *const MccsrImage,
    options: *const MccsrSrOptions,
    out: *mut *mut MccsrImage,
) -> MccsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dict = dict.as_ref().ok_or_else(|| null("dict"))?;
        let lr = lr.as_ref().ok_or_else(|| null("lr"))?;
        let o = options.as_ref().copied().unwrap_or_else(|| mccsr_sr_options_default());
        let mut cfg = SrConfig {
            scale: if o.scale == 0 { dict.0.scale } else { o.scale as usize },
            patch_side: dict.0.patch_side,
            lambda: o.lambda,
            noise_sigma: (o.noise_sigma > 0.0).then_some(o.noise_sigma),
            tau_override: (o.force_tau >= 0.0).then_some(o.force_tau),
            ..Default::default()
        };
        cfg.tau_map.tau_max = o.tau_max;
        if cfg.scale != dict.0.scale {
            return Err(Failure(
                MccsrStatus::Format,
                format!("dictionary was trained for scale {}, not {}", dict.0.scale, cfg.scale),
            ));
        }
        store(out, MccsrImage(super_resolve(&lr.0, &dict.0, &cfg)?));
        Ok(())
    })
}

/// Bicubic downsampling by `scale`, then optional seeded Gaussian noise.
///
/// # Safety
/// `img` must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_degrade(
    img: *const MccsrImage,
    scale: u32,
    noise_sigma: f64,
    seed: u64,
    out: *mut *mut MccsrImage,
) -> MccsrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let img = img.as_ref().ok_or_else(|| null("img"))?;
        let mut lr = degrade(&img.0, scale as usize)?;
        if noise_sigma != 0.0 {
            lr = add_gaussian_noise(&lr, noise_sigma, seed)?;
        }
        store(out, MccsrImage(lr));
        Ok(())
    })
}

/// PSNR, SSIM and S-CIELAB of `test` against `reference`.
///
/// # Safety
/// Both images must come from this library; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mccsr_evaluate(
    reference: *const MccsrImage,
    test: *const MccsrImage,
    samples_per_degree: f64,
    out: *mut MccsrMetrics,
) -> MccsrStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let reference = reference.as_ref().ok_or_else(|| null("reference"))?;
        let test = test.as_ref().ok_or_else(|| null("test"))?;
        if !(samples_per_degree > 0.0) {
            return Err(Failure(MccsrStatus::InvalidArgument, "samples per degree must be > 0".into()));
        }
        let r = evaluate(&reference.0, &test.0, samples_per_degree)?;
        *out = MccsrMetrics { psnr_db: r.psnr_db, ssim: r.ssim, scielab_total: r.scielab_total };
        Ok(())
    })
}
