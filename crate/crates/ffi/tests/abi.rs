use std::ffi::{c_char, CString};
use std::ptr;

use rflux_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { rflux_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn new_model(preset: &str, init: RfluxInit, seed: u64) -> *mut RfluxModel {
    let p = CString::new(preset).unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { rflux_model_new(p.as_ptr(), init, seed, &mut m) };
    assert_eq!(st, RfluxStatus::Ok, "{}", last_error());
    assert!(!m.is_null());
    m
}

fn params(prompt: &CString) -> RfluxSampleParams {
    RfluxSampleParams {
        prompt: prompt.as_ptr(),
        ..rflux_sample_params_default()
    }
}

#[test]
fn param_counts_agree() {
    let m = new_model("toy", RfluxInit::Dense, 0);
    let mut from_model = 0u64;
    let mut from_preset = 0u64;
    let toy = CString::new("toy").unwrap();
    unsafe {
        assert_eq!(rflux_model_param_count(m, &mut from_model), RfluxStatus::Ok);
        assert_eq!(rflux_preset_param_count(toy.as_ptr(), &mut from_preset), RfluxStatus::Ok);
        rflux_model_free(m);
    }
    assert_eq!(from_model, from_preset);
    assert_eq!(from_model, rflux::transformer::count_params(&rflux::transformer::ModelConfig::toy()));

    let flux = CString::new("flux-shape").unwrap();
    let mut big = 0u64;
    assert_eq!(unsafe { rflux_preset_param_count(flux.as_ptr(), &mut big) }, RfluxStatus::Ok);
    assert!((11_000_000_000..=13_000_000_000).contains(&big), "{big}");
}

#[test]
fn flux_shape_cannot_be_allocated() {
    let p = CString::new("flux-shape").unwrap();
    let mut m = ptr::null_mut();
    let st = unsafe { rflux_model_new(p.as_ptr(), RfluxInit::Dense, 0, &mut m) };
    assert_eq!(st, RfluxStatus::InvalidArgument);
    assert!(m.is_null());
    assert!(last_error().contains("inspect-only"));
}

#[test]
fn null_and_bad_arguments() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(rflux_model_new(ptr::null(), RfluxInit::Dense, 0, &mut m), RfluxStatus::NullPointer);
        let bogus = CString::new("huge").unwrap();
        assert_eq!(rflux_model_new(bogus.as_ptr(), RfluxInit::Dense, 0, &mut m), RfluxStatus::InvalidArgument);
        let mut n = 0u64;
        assert_eq!(rflux_model_param_count(ptr::null(), &mut n), RfluxStatus::NullPointer);
        rflux_model_free(ptr::null_mut());
    }
    assert!(!last_error().is_empty());
}

#[test]
fn sample_rgb_matches_file_output() {
    let m = new_model("toy", RfluxInit::Dense, 0);
    let prompt = CString::new("x").unwrap();
    let mut p = params(&prompt);
    p.seed = 1;

    let mut need = 0usize;
    let st = unsafe { rflux_sample_rgb(m, &p, ptr::null_mut(), 0, &mut need) };
    assert_eq!(st, RfluxStatus::BufferTooSmall);
    assert_eq!(need, 64 * 64 * 3);

    let mut rgb = vec![0u8; need];
    let st = unsafe { rflux_sample_rgb(m, &p, rgb.as_mut_ptr(), rgb.len(), &mut need) };
    assert_eq!(st, RfluxStatus::Ok, "{}", last_error());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ppm");
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut hash = 0u64;
    let st = unsafe { rflux_sample_to_file(m, &p, cpath.as_ptr(), &mut hash) };
    assert_eq!(st, RfluxStatus::Ok, "{}", last_error());
    unsafe { rflux_model_free(m) };

    let ppm = std::fs::read(&path).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(&ppm[ppm.len() - rgb.len()..], rgb.as_slice());
    assert!(path.with_extension("ppm.manifest").exists());
    assert_ne!(hash, 0);
}

#[test]
fn invalid_geometry_is_reported() {
    let m = new_model("toy", RfluxInit::Dense, 0);
    let prompt = CString::new("x").unwrap();
    let mut p = params(&prompt);
    p.width = 60;
    let mut need = 0usize;
    let st = unsafe { rflux_sample_rgb(m, &p, ptr::null_mut(), 0, &mut need) };
    unsafe { rflux_model_free(m) };
    assert_eq!(st, RfluxStatus::InvalidArgument);
    assert!(last_error().contains("multiple of 16"), "{}", last_error());
}

#[test]
fn save_load_round_trip_and_io_errors() {
    let m = new_model("tiny", RfluxInit::Dense, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.rfxw").to_str().unwrap()).unwrap();
    let tiny = CString::new("tiny").unwrap();
    let prompt = CString::new("round trip").unwrap();
    let mut p = params(&prompt);
    p.width = 16;
    p.height = 16;
    let need = 16 * 16 * 3;
    let (mut a, mut b) = (vec![0u8; need], vec![0u8; need]);
    let mut n = 0usize;
    unsafe {
        assert_eq!(rflux_model_save(m, path.as_ptr()), RfluxStatus::Ok, "{}", last_error());
        let mut loaded = ptr::null_mut();
        assert_eq!(rflux_model_load(tiny.as_ptr(), path.as_ptr(), &mut loaded), RfluxStatus::Ok, "{}", last_error());
        assert_eq!(rflux_sample_rgb(m, &p, a.as_mut_ptr(), need, &mut n), RfluxStatus::Ok);
        assert_eq!(rflux_sample_rgb(loaded, &p, b.as_mut_ptr(), need, &mut n), RfluxStatus::Ok);
        rflux_model_free(loaded);
        rflux_model_free(m);

        let missing = CString::new(dir.path().join("missing.rfxw").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(rflux_model_load(tiny.as_ptr(), missing.as_ptr(), &mut none), RfluxStatus::Io);
        assert!(none.is_null());
        let toy = CString::new("toy").unwrap();
        assert_eq!(rflux_model_load(toy.as_ptr(), path.as_ptr(), &mut none), RfluxStatus::Format);
    }
    assert_eq!(a, b);
}

#[test]
fn error_buffer_truncates_and_terminates() {
    let mut n = 0u64;
    unsafe { rflux_model_param_count(ptr::null(), &mut n) };
    let full = unsafe { rflux_last_error_message(ptr::null_mut(), 0) };
    assert!(full > 4);
    let mut buf = [1 as c_char; 4];
    let got = unsafe { rflux_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert_eq!(got, full);
    assert_eq!(buf[3], 0);
}
