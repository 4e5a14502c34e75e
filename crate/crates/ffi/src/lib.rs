//! C ABI for the rflux model and sampling pipeline.
//!
//! Models are opaque [`RfluxModel`] handles. Every fallible call returns an
//! [`RfluxStatus`]; on failure the message is kept per thread and can be
//! copied out with [`rflux_last_error_message`]. Panics never cross the
//! boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use rflux::blocks::InitScheme;
use rflux::nn::Parameters;
use rflux::pipeline::{self, LatentGeometry, Manifest, PipelineRequest};
use rflux::transformer::{self, FluxTransformer, ModelConfig};
use rflux::FluxError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfluxStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numeric = 4,
    Format = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfluxInit {
    /// All weights random.
    Dense = 0,
    /// Modulation and output head zeroed; the model starts as the identity.
    AdalnZero = 1,
}

/// Sampling request. `prompt` must be NUL-terminated UTF-8.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RfluxSampleParams {
    pub prompt: *const c_char,
    pub width: usize,
    pub height: usize,
    pub steps: usize,
    pub guidance: f64,
    pub seed: u64,
}

/// Opaque model handle.
pub struct RfluxModel {
    model: FluxTransformer,
    preset: String,
    provenance: Vec<(&'static str, String)>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(RfluxStatus, String);

impl From<FluxError> for Failure {
    fn from(e: FluxError) -> Self {
        let status = match e {
            FluxError::Io { .. } => RfluxStatus::Io,
            FluxError::Format(_) => RfluxStatus::Format,
            FluxError::Divergence { .. } | FluxError::NonFinite { .. } => RfluxStatus::Numeric,
            _ => RfluxStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(RfluxStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RfluxStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RfluxStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RfluxStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(RfluxStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn model_arg<'a>(p: *const RfluxModel) -> Result<&'a RfluxModel, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure(RfluxStatus::NullPointer, "model is null".into()))
}

fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    unsafe { p.as_mut() }.ok_or_else(|| Failure(RfluxStatus::NullPointer, format!("{what} is null")))
}

fn sampling_config(preset: &str) -> Result<ModelConfig, Failure> {
    let cfg = ModelConfig::preset(preset)?;
    if cfg.d_model > 1024 {
        return Err(invalid(format!(
            "preset `{preset}` is inspect-only; use rflux_preset_param_count"
        )));
    }
    Ok(cfg)
}

unsafe fn request(p: *const RfluxSampleParams) -> Result<PipelineRequest, Failure> {
    let p = p
        .as_ref()
        .ok_or_else(|| Failure(RfluxStatus::NullPointer, "params is null".into()))?;
    if p.steps == 0 {
        return Err(invalid("steps must be >= 1"));
    }
    Ok(PipelineRequest {
        prompt: str_arg(p.prompt, "prompt")?.to_owned(),
        guidance_scale: p.guidance,
        num_inference_steps: p.steps,
        width: p.width,
        height: p.height,
        seed: p.seed,
    })
}

/// Defaults matching the command-line `sample` subcommand, with an empty
/// prompt.
#[no_mangle]
pub extern "C" fn rflux_sample_params_default() -> RfluxSampleParams {
    let d = PipelineRequest::default();
    RfluxSampleParams {
        prompt: c"".as_ptr(),
        width: d.width,
        height: d.height,
        steps: d.num_inference_steps,
        guidance: d.guidance_scale,
        seed: d.seed,
    }
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn rflux_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (always
/// NUL-terminated when `len > 0`) and returns the full message length
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn rflux_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Allocates a model with seeded weights for `preset` ("toy" or "tiny").
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rflux_model_new(
    preset: *const c_char,
    init: RfluxInit,
    seed: u64,
    out: *mut *mut RfluxModel,
) -> RfluxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let name = str_arg(preset, "preset")?;
        let cfg = sampling_config(name)?;
        let (scheme, init_name) = match init {
            RfluxInit::Dense => (InitScheme::Dense, "dense"),
            RfluxInit::AdalnZero => (InitScheme::AdaLnZero, "adaln-zero"),
        };
        let model = FluxTransformer::new(cfg, scheme, seed)?;
        *out = Box::into_raw(Box::new(RfluxModel {
            model,
            preset: name.to_owned(),
            provenance: vec![("init", init_name.into()), ("weights-seed", seed.to_string())],
        }));
        Ok(())
    })
}

/// Loads a model for `preset` from a weight container written by
/// [`rflux_model_save`].
///
/// # Safety
/// `preset` and `path` must be NUL-terminated strings; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn rflux_model_load(
    preset: *const c_char,
    path: *const c_char,
    out: *mut *mut RfluxModel,
) -> RfluxStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let name = str_arg(preset, "preset")?;
        let path = str_arg(path, "path")?;
        let cfg = sampling_config(name)?;
        let model = FluxTransformer::load(cfg, path)?;
        *out = Box::into_raw(Box::new(RfluxModel {
            model,
            preset: name.to_owned(),
            provenance: vec![("weights", path.to_owned())],
        }));
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rflux_model_free(model: *mut RfluxModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rflux_model_param_count(
    model: *const RfluxModel,
    out_count: *mut u64,
) -> RfluxStatus {
    guard(|| {
        let m = model_arg(model)?;
        *out_arg(out_count, "out_count")? = m.model.param_count() as u64;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rflux_model_save(
    model: *const RfluxModel,
    path: *const c_char,
) -> RfluxStatus {
    guard(|| {
        let m = model_arg(model)?;
        m.model.save(str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Parameter count of any preset, computed from its shape without
/// allocating weights.
///
/// # Safety
/// `preset` must be a NUL-terminated string; `out_count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rflux_preset_param_count(
    preset: *const c_char,
    out_count: *mut u64,
) -> RfluxStatus {
    guard(|| {
        let cfg = ModelConfig::preset(str_arg(preset, "preset")?)?;
        cfg.validate()?;
        *out_arg(out_count, "out_count")? = transformer::count_params(&cfg);
        Ok(())
    })
}

/// Samples an image into `buf` as packed row-major RGB bytes.
///
/// `*out_written` always receives the required size (`width * height * 3`).
/// If `buf` is null or `len` is smaller, nothing is sampled and
/// `RFLUX_STATUS_BUFFER_TOO_SMALL` is returned.
///
/// # Safety
/// `model` must be a live handle, `params` readable, `buf` null or valid
/// for `len` bytes, `out_written` writable.
#[no_mangle]
pub unsafe extern "C" fn rflux_sample_rgb(
    model: *const RfluxModel,
    params: *const RfluxSampleParams,
    buf: *mut u8,
    len: usize,
    out_written: *mut usize,
) -> RfluxStatus {
    guard(|| {
        let m = model_arg(model)?;
        let req = request(params)?;
        let written = out_arg(out_written, "out_written")?;
        LatentGeometry::new(req.width, req.height, &m.model.config)?;
        let need = req.width * req.height * 3;
        *written = need;
        if buf.is_null() || len < need {
            return Err(Failure(
                RfluxStatus::BufferTooSmall,
                format!("buffer holds {len} bytes, image needs {need}"),
            ));
        }
        let z = pipeline::sample(&req, &m.model, &m.model.config)?;
        let img = pipeline::stub_decode(&z)?;
        std::slice::from_raw_parts_mut(buf, need).copy_from_slice(&img.data);
        Ok(())
    })
}

/// Samples and writes `path` (binary PPM) plus `path.manifest`.
/// `out_hash` may be null; otherwise it receives the FNV-1a hash of the
/// PPM bytes.
///
/// # Safety
/// `model` must be a live handle, `params` readable, `path` a
/// NUL-terminated string, `out_hash` null or writable.
#[no_mangle]
pub unsafe extern "C" fn rflux_sample_to_file(
    model: *const RfluxModel,
    params: *const RfluxSampleParams,
    path: *const c_char,
    out_hash: *mut u64,
) -> RfluxStatus {
    guard(|| {
        let m = model_arg(model)?;
        let req = request(params)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let manifest = Manifest::for_request(&req, &m.preset, &m.provenance);
        let outputs = pipeline::run_to_files(&req, &m.model, &m.model.config, &path, &manifest, false)?;
        if let Some(h) = out_hash.as_mut() {
            *h = outputs.ppm_hash;
        }
        Ok(())
    })
}
