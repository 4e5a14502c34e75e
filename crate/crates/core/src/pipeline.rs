//! Text-to-image sampling: stub encoders, latent packing, the Euler
//! refinement loop, stub decoding and PPM output.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::embeddings::{build_img_ids, build_text_ids, RopeTables, TokenIds};
use crate::error::{FluxError, Result};
use crate::numerics::{matmul, rand_uniform, randn};
use crate::rf_math::{euler_step, make_time_grid};
use crate::rng::{fnv1a, mix64, Fnv1a, Rng};
use crate::tensor::Tensor;
use crate::transformer::{FluxTransformer, GuidanceInputs, ModelConfig};
use crate::weights;

/// Pixel-to-latent downsampling factor of the (stubbed) autoencoder.
pub const VAE_SCALE: usize = 8;

const POOLED_PROJ_SEED: u64 = 0x706f_6f6c_6564;
const DECODE_SEED: u64 = 0x6465_636f_6465;

/// Anything that predicts packed-latent velocity. Implemented by the
/// transformer and by test doubles.
pub trait VelocityModel {
    fn velocity(
        &self,
        packed_latents: &Tensor,
        text_embeds: &Tensor,
        rope: &RopeTables,
        g: &GuidanceInputs,
    ) -> Result<Tensor>;
}

impl VelocityModel for FluxTransformer {
    fn velocity(
        &self,
        packed_latents: &Tensor,
        text_embeds: &Tensor,
        rope: &RopeTables,
        g: &GuidanceInputs,
    ) -> Result<Tensor> {
        self.forward_with_rope(packed_latents, text_embeds, rope, g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRequest {
    pub prompt: String,
    pub guidance_scale: f64,
    pub num_inference_steps: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for PipelineRequest {
    fn default() -> Self {
        PipelineRequest {
            prompt: String::new(),
            guidance_scale: 3.5,
            num_inference_steps: 4,
            width: 64,
            height: 64,
            seed: 0,
        }
    }
}

/// Pixel, latent and token-grid sizes for one request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentGeometry {
    pub width: usize,
    pub height: usize,
    pub h: usize,
    pub w: usize,
    pub h_grid: usize,
    pub w_grid: usize,
    pub vae_scale: usize,
    pub patch: usize,
    pub latent_channels: usize,
}

impl LatentGeometry {
    pub fn new(width: usize, height: usize, cfg: &ModelConfig) -> Result<Self> {
        let unit = VAE_SCALE * cfg.patch;
        for (name, v) in [("width", width), ("height", height)] {
            if v == 0 || v % unit != 0 {
                return Err(FluxError::Geometry(format!(
                    "{name} {v} must be a positive multiple of {unit} (vae scale {VAE_SCALE} x patch {})",
                    cfg.patch
                )));
            }
        }
        let (h, w) = (height / VAE_SCALE, width / VAE_SCALE);
        Ok(LatentGeometry {
            width,
            height,
            h,
            w,
            h_grid: h / cfg.patch,
            w_grid: w / cfg.patch,
            vae_scale: VAE_SCALE,
            patch: cfg.patch,
            latent_channels: cfg.latent_channels,
        })
    }

    pub fn n_img(&self) -> usize {
        self.h_grid * self.w_grid
    }

    pub fn token_features(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.h, self.w]
    }
}

/// Deterministic stand-ins for the dense and pooled prompt encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct StubTextEncodings {
    pub dense: Tensor,
    pub pooled: Tensor,
}

fn rms_normalize(v: &mut [f64]) {
    let ms = v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64;
    let inv = 1.0 / ms.sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x *= inv);
}

pub fn stub_encode_text(
    prompt: &str,
    n_txt: usize,
    text_token_dim: usize,
    pooled_dim: usize,
) -> Result<StubTextEncodings> {
    if n_txt == 0 || text_token_dim == 0 || pooled_dim == 0 {
        return Err(FluxError::Domain(
            "text encoder needs n_txt, text_token_dim and pooled_dim >= 1".into(),
        ));
    }
    let h = fnv1a(prompt.as_bytes());
    let mut dense = Tensor::zeros([n_txt, text_token_dim]);
    for i in 0..n_txt {
        let mut rng = Rng::new(mix64(h ^ mix64(i as u64 + 1)));
        let row = dense.row_mut(i);
        row.iter_mut().for_each(|x| *x = rng.normal());
        rms_normalize(row);
    }
    let mean = dense.sum_rows().scale(1.0 / n_txt as f64);
    let bound = 1.0 / (text_token_dim as f64).sqrt();
    let proj = rand_uniform(&mut Rng::new(POOLED_PROJ_SEED), [text_token_dim, pooled_dim], bound);
    let mean = mean.reshape([1, text_token_dim])?;
    let mut pooled = matmul(&mean, &proj)?.reshape([pooled_dim])?;
    rms_normalize(pooled.data_mut());
    Ok(StubTextEncodings { dense, pooled })
}

/// `[C × h × w]` → `[(h/p)(w/p) × C·p²]` with patch `p`; features are
/// channel-major, then `(dy, dx)` row-major inside the patch.
pub fn pack_latents_with(z: &Tensor, patch: usize) -> Result<Tensor> {
    let [c, h, w] = latent_dims(z, "pack_latents")?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(FluxError::Geometry(format!(
            "latent {h}x{w} is not divisible by patch {patch}"
        )));
    }
    let (hg, wg, pp) = (h / patch, w / patch, patch * patch);
    let src = z.data();
    let mut out = Tensor::zeros([hg * wg, c * pp]);
    for gy in 0..hg {
        for gx in 0..wg {
            let row = out.row_mut(gy * wg + gx);
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (gy * patch + dy, gx * patch + dx);
                        row[ch * pp + dy * patch + dx] = src[(ch * h + y) * w + x];
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn pack_latents(z: &Tensor) -> Result<Tensor> {
    pack_latents_with(z, 2)
}

/// Inverse of [`pack_latents_with`].
pub fn unpack_latents(packed: &Tensor, geom: &LatentGeometry) -> Result<Tensor> {
    let p = geom.patch;
    let (c, pp) = (geom.latent_channels, p * p);
    packed.expect_shape("unpack_latents", &[geom.n_img(), geom.token_features()])?;
    let mut z = Tensor::zeros(geom.latent_shape());
    let (h, w) = (geom.h, geom.w);
    let dst = z.data_mut();
    for gy in 0..geom.h_grid {
        for gx in 0..geom.w_grid {
            let row = packed.row(gy * geom.w_grid + gx);
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        let (y, x) = (gy * p + dy, gx * p + dx);
                        dst[(ch * h + y) * w + x] = row[ch * pp + dy * p + dx];
                    }
                }
            }
        }
    }
    Ok(z)
}

fn latent_dims(z: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match z.shape() {
        &[c, h, w] => Ok([c, h, w]),
        other => Err(FluxError::shape(op, other, &[0, 0, 0])),
    }
}

/// Everything handed to the velocity model at one step.
#[derive(Debug)]
pub struct StepView<'a> {
    pub index: usize,
    pub s: f64,
    pub ds: f64,
    pub packed: &'a Tensor,
    pub text: &'a Tensor,
    pub ids: &'a TokenIds,
    pub rope: &'a RopeTables,
    pub guidance: &'a GuidanceInputs,
}

impl StepView<'_> {
    /// Hash of the step-invariant conditioning (text, pooled, guidance, ids).
    pub fn phi_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write(&self.text.content_hash().to_le_bytes());
        h.write(&self.guidance.pooled.content_hash().to_le_bytes());
        h.write(&self.guidance.guidance.to_bits().to_le_bytes());
        for row in self.ids.rows() {
            for v in row {
                h.write(&v.to_le_bytes());
            }
        }
        h.finish()
    }
}

/// Prepared step-invariant inputs for a run.
#[derive(Debug, Clone)]
pub struct RunInputs {
    pub geometry: LatentGeometry,
    pub text: StubTextEncodings,
    pub ids: TokenIds,
    pub rope: RopeTables,
}

pub fn prepare(req: &PipelineRequest, cfg: &ModelConfig) -> Result<RunInputs> {
    let geometry = LatentGeometry::new(req.width, req.height, cfg)?;
    if req.num_inference_steps == 0 {
        return Err(FluxError::Domain("num_inference_steps must be >= 1".into()));
    }
    if !req.guidance_scale.is_finite() || req.guidance_scale < 0.0 {
        return Err(FluxError::Domain(format!(
            "guidance scale {} must be finite and >= 0",
            req.guidance_scale
        )));
    }
    let text = stub_encode_text(&req.prompt, cfg.n_txt.max(1), cfg.text_token_dim, cfg.pooled_dim)?;
    let ids = cfg.order.join_ids(
        &build_text_ids(cfg.n_txt.max(1)),
        &build_img_ids(geometry.h_grid, geometry.w_grid)?,
    );
    let rope = crate::embeddings::build_rope_tables(&ids, &cfg.rope)?;
    Ok(RunInputs {
        geometry,
        text,
        ids,
        rope,
    })
}

/// Initial latent noise for a request.
pub fn initial_noise(req: &PipelineRequest, geom: &LatentGeometry) -> Tensor {
    randn(&mut Rng::new(req.seed).fork("latent"), geom.latent_shape())
}

/// Runs the refinement loop and returns the final `[C × h × w]` latent.
pub fn sample(req: &PipelineRequest, model: &dyn VelocityModel, cfg: &ModelConfig) -> Result<Tensor> {
    sample_observed(req, model, cfg, &mut |_| {})
}

/// [`sample`], calling `observe` before each model evaluation.
pub fn sample_observed(
    req: &PipelineRequest,
    model: &dyn VelocityModel,
    cfg: &ModelConfig,
    observe: &mut dyn FnMut(&StepView<'_>),
) -> Result<Tensor> {
    let run = prepare(req, cfg)?;
    let grid = make_time_grid(req.num_inference_steps)?;
    let mut packed = pack_latents_with(&initial_noise(req, &run.geometry), cfg.patch)?;
    let mut g = GuidanceInputs::new(0.0, req.guidance_scale, run.text.pooled.clone());
    for (index, (s, ds)) in grid.steps().enumerate() {
        g.timestep = s;
        observe(&StepView {
            index,
            s,
            ds,
            packed: &packed,
            text: &run.text.dense,
            ids: &run.ids,
            rope: &run.rope,
            guidance: &g,
        });
        let v = model.velocity(&packed, &run.text.dense, &run.rope, &g)?;
        packed = euler_step(&packed, &v, ds)?;
    }
    unpack_latents(&packed, &run.geometry)
}

/// [`sample`] that also returns the latent after every step, starting
/// with the initial noise as `step_0`.
pub fn sample_with_trajectory(
    req: &PipelineRequest,
    model: &dyn VelocityModel,
    cfg: &ModelConfig,
) -> Result<(Tensor, Vec<(String, Tensor)>)> {
    let geom = LatentGeometry::new(req.width, req.height, cfg)?;
    let mut packed_states = Vec::with_capacity(req.num_inference_steps + 1);
    let out = sample_observed(req, model, cfg, &mut |view| packed_states.push(view.packed.clone()))?;
    let mut dump = Vec::with_capacity(packed_states.len() + 1);
    for (i, p) in packed_states.iter().enumerate() {
        dump.push((format!("step_{i}"), unpack_latents(p, &geom)?));
    }
    dump.push((format!("step_{}", packed_states.len()), out.clone()));
    Ok((out, dump))
}

/// 8-bit RGB raster, row-major from the top-left corner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Maps latents to pixels: a fixed random `C → 3` projection per latent
/// pixel, nearest-neighbour upsampling by [`VAE_SCALE`], then
/// `round(128 + 64·y)` clamped to `[0, 255]`.
pub fn stub_decode(z: &Tensor) -> Result<RgbImage> {
    let [c, h, w] = latent_dims(z, "stub_decode")?;
    let bound = 1.0 / (c.max(1) as f64).sqrt();
    let map = rand_uniform(&mut Rng::new(DECODE_SEED), [3, c], bound);
    let (width, height) = (w * VAE_SCALE, h * VAE_SCALE);
    let mut small = vec![0u8; h * w * 3];
    let src = z.data();
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let v: f64 = (0..c).map(|ch| map.get2(k, ch) * src[(ch * h + y) * w + x]).sum();
                let p = (128.0 + 64.0 * v).round().clamp(0.0, 255.0);
                small[(y * w + x) * 3 + k] = if p.is_nan() { 128 } else { p as u8 };
            }
        }
    }
    let mut data = vec![0u8; width * height * 3];
    for py in 0..height {
        for px in 0..width {
            let s = ((py / VAE_SCALE) * w + px / VAE_SCALE) * 3;
            let d = (py * width + px) * 3;
            data[d..d + 3].copy_from_slice(&small[s..s + 3]);
        }
    }
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.data.len() != img.width * img.height * 3 {
        return Err(FluxError::shape(
            "write_ppm",
            &[img.data.len()],
            &[img.width * img.height * 3],
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| FluxError::io(path, e))?;
    f.write_all(&encode_ppm(img)).map_err(|e| FluxError::io(path, e))
}

fn escape(value: &str) -> String {
    value
        .replace('\\', "\\\\")
        .replace('\n', "\\n")
        .replace('\r', "\\r")
}

/// Run description written next to each image.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn for_request(req: &PipelineRequest, preset: &str, extra: &[(&str, String)]) -> Self {
        let mut entries = vec![
            ("prompt".to_owned(), escape(&req.prompt)),
            ("seed".to_owned(), req.seed.to_string()),
            ("steps".to_owned(), req.num_inference_steps.to_string()),
            ("guidance".to_owned(), format!("{}", req.guidance_scale)),
            ("width".to_owned(), req.width.to_string()),
            ("height".to_owned(), req.height.to_string()),
            ("preset".to_owned(), preset.to_owned()),
        ];
        entries.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
        entries.push(("build".to_owned(), build_describe().to_owned()));
        Manifest { entries }
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.render()).map_err(|e| FluxError::io(path, e))
    }
}

pub fn build_describe() -> &'static str {
    env!("RFLUX_BUILD_DESCRIBE")
}

pub fn manifest_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn latents_path(image: &Path) -> PathBuf {
    let mut s = image.as_os_str().to_owned();
    s.push(".latents.rfxw");
    PathBuf::from(s)
}

/// Files produced by [`run_to_files`].
#[derive(Debug, Clone)]
pub struct RunOutputs {
    pub image: PathBuf,
    pub manifest: PathBuf,
    pub latents: Option<PathBuf>,
    pub ppm_hash: u64,
}

/// Sample, decode, and write the PPM, its manifest and (optionally) the
/// per-step latent dump.
pub fn run_to_files(
    req: &PipelineRequest,
    model: &dyn VelocityModel,
    cfg: &ModelConfig,
    out: &Path,
    manifest: &Manifest,
    dump_latents: bool,
) -> Result<RunOutputs> {
    let (z, dump) = if dump_latents {
        let (z, d) = sample_with_trajectory(req, model, cfg)?;
        (z, Some(d))
    } else {
        (sample(req, model, cfg)?, None)
    };
    let img = stub_decode(&z)?;
    let bytes = encode_ppm(&img);
    fs::write(out, &bytes).map_err(|e| FluxError::io(out, e))?;
    let manifest_file = manifest_path(out);
    manifest.write(&manifest_file)?;
    let latents = match dump {
        Some(d) => {
            let p = latents_path(out);
            weights::write_file(&p, &d)?;
            Some(p)
        }
        None => None,
    };
    Ok(RunOutputs {
        image: out.to_path_buf(),
        manifest: manifest_file,
        latents,
        ppm_hash: fnv1a(&bytes),
    })
}
