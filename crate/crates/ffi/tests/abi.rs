use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use mccsr::image::PlanarImage;
use mccsr::synthetic::textured_image;
use mccsr_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mccsr_last_error_message()) }.to_string_lossy().into_owned()
}

fn image_handle(img: &PlanarImage) -> *mut MccsrImage {
    let bytes = img.to_rgb8().unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { mccsr_image_from_rgb8(img.width(), img.height(), bytes.as_ptr(), bytes.len(), &mut out) };
    assert_eq!(status, MccsrStatus::Ok, "{}", last_error());
    out
}

fn pixels(img: *const MccsrImage) -> Vec<u8> {
    let len = unsafe { mccsr_image_width(img) * mccsr_image_height(img) * 3 };
    let mut buf = vec![0u8; len];
    assert_eq!(unsafe { mccsr_image_to_rgb8(img, buf.as_mut_ptr(), len) }, MccsrStatus::Ok);
    buf
}

fn c_path(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn rgb8_roundtrip() {
    let img = textured_image(20, 12, 3).unwrap();
    let h = image_handle(&img);
    assert_eq!(unsafe { (mccsr_image_width(h), mccsr_image_height(h)) }, (20, 12));
    assert_eq!(pixels(h), img.to_rgb8().unwrap());
    unsafe { mccsr_image_free(h) };
}

#[test]
fn null_and_size_errors_are_reported() {
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { mccsr_image_from_rgb8(4, 4, ptr::null(), 48, &mut out) }, MccsrStatus::NullPointer);
    assert!(last_error().contains("data"));
    let data = [0u8; 10];
    assert_eq!(unsafe { mccsr_image_from_rgb8(4, 4, data.as_ptr(), data.len(), &mut out) }, MccsrStatus::Dimension);
    assert!(out.is_null());
    assert_eq!(unsafe { mccsr_dictionary_atoms(ptr::null()) }, 0);
    assert_eq!(unsafe { mccsr_image_width(ptr::null()) }, 0);
    unsafe {
        mccsr_image_free(ptr::null_mut());
        mccsr_dictionary_free(ptr::null_mut());
    }
}

#[test]
fn missing_dictionary_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = c_path(&dir.path().join("absent.bin"));
    let mut d = ptr::null_mut();
    assert_eq!(unsafe { mccsr_dictionary_load(path.as_ptr(), &mut d) }, MccsrStatus::Io);
    assert!(d.is_null());
    assert!(!last_error().is_empty());

    std::fs::write(dir.path().join("junk.bin"), b"not a dictionary").unwrap();
    let junk = c_path(&dir.path().join("junk.bin"));
    assert_eq!(unsafe { mccsr_dictionary_load(junk.as_ptr(), &mut d) }, MccsrStatus::Format);
}

#[test]
fn degrade_and_evaluate_match_the_library() {
    let img = textured_image(32, 32, 4).unwrap();
    let h = image_handle(&img);
    let mut lr = ptr::null_mut();
    assert_eq!(unsafe { mccsr_degrade(h, 2, 0.0, 0, &mut lr) }, MccsrStatus::Ok);
    let quantized = PlanarImage::from_rgb8(32, 32, &img.to_rgb8().unwrap()).unwrap();
    let expected = mccsr::pipeline::degrade(&quantized, 2).unwrap();
    assert_eq!(pixels(lr), expected.to_rgb8().unwrap());

    let mut noisy = ptr::null_mut();
    assert_eq!(unsafe { mccsr_degrade(h, 2, 4.0, 9, &mut noisy) }, MccsrStatus::Ok);
    assert_ne!(pixels(noisy), pixels(lr));
    assert_eq!(unsafe { mccsr_degrade(h, 5, 0.0, 0, &mut noisy) }, MccsrStatus::Dimension);
    assert!(noisy.is_null());

    let mut m = MccsrMetrics::default();
    assert_eq!(unsafe { mccsr_evaluate(h, h, 23.0, &mut m) }, MccsrStatus::Ok);
    assert!(m.psnr_db.is_infinite() && (m.ssim - 1.0).abs() < 1e-12 && m.scielab_total == 0.0);
    assert_eq!(unsafe { mccsr_evaluate(h, lr, 23.0, &mut m) }, MccsrStatus::Dimension);
    unsafe {
        mccsr_image_free(lr);
        mccsr_image_free(h);
    }
}

#[test]
fn train_save_load_and_upscale() {
    let images: Vec<_> = (1..=2).map(|s| image_handle(&textured_image(40, 40, s).unwrap())).collect();
    let handles: Vec<*const MccsrImage> = images.iter().map(|&h| h as *const _).collect();
    let mut opts = mccsr_train_options_default();
    opts.atoms = 8;
    opts.samples = 300;
    opts.outer_iterations = 2;
    opts.seed = 5;
    let mut dict = ptr::null_mut();
    let status = unsafe { mccsr_train(handles.as_ptr(), handles.len(), &opts, &mut dict) };
    assert_eq!(status, MccsrStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { (mccsr_dictionary_atoms(dict), mccsr_dictionary_scale(dict)) }, (8, 2));

    let dir = tempfile::tempdir().unwrap();
    let path = c_path(&dir.path().join("d.bin"));
    assert_eq!(unsafe { mccsr_dictionary_save(dict, path.as_ptr()) }, MccsrStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { mccsr_dictionary_load(path.as_ptr(), &mut loaded) }, MccsrStatus::Ok);

    let lr = image_handle(&textured_image(16, 16, 9).unwrap());
    let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { mccsr_super_resolve(dict, lr, ptr::null(), &mut a) }, MccsrStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { mccsr_super_resolve(loaded, lr, ptr::null(), &mut b) }, MccsrStatus::Ok);
    assert_eq!(unsafe { (mccsr_image_width(a), mccsr_image_height(a)) }, (32, 32));
    assert_eq!(pixels(a), pixels(b));

    let mut o = mccsr_sr_options_default();
    o.scale = 3;
    let mut c = ptr::null_mut();
    assert_eq!(unsafe { mccsr_super_resolve(dict, lr, &o, &mut c) }, MccsrStatus::Format);

    let mut too_many = opts;
    too_many.samples = 5_000_000;
    let mut none = ptr::null_mut();
    assert_eq!(unsafe { mccsr_train(handles.as_ptr(), handles.len(), &too_many, &mut none) }, MccsrStatus::InsufficientData);
    unsafe {
        for h in [a, b, lr].into_iter().chain(images) {
            mccsr_image_free(h);
        }
        mccsr_dictionary_free(dict);
        mccsr_dictionary_free(loaded);
    }
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mccsr.h")).unwrap();
    for name in [
        "mccsr_last_error_message",
        "mccsr_dictionary_load",
        "mccsr_dictionary_free",
        "mccsr_train",
        "mccsr_image_from_rgb8",
        "mccsr_image_to_rgb8",
        "mccsr_super_resolve",
        "mccsr_degrade",
        "mccsr_evaluate",
        "typedef struct MccsrImage MccsrImage",
        "MCCSR_STATUS_FORMAT = 4",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

/// Compiles a C program against the generated header and static library.
/// Skipped when no C compiler is installed.
#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libmccsr_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = Command::new("cc")
        .arg(manifest.join("tests/c/smoke.c"))
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).arg(dir.path().join("missing.bin")).output().unwrap();
    assert!(run.status.success(), "exit {:?}: {}", run.status.code(), String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
