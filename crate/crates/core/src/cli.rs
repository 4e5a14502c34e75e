//! Command-line front end: `sample`, `train-toy` and `inspect`.
//!
//! Every option may also come from a `key = value` file passed with
//! `--config`; flags win over the file. Each run prints its resolved
//! configuration before doing any work.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::blocks::InitScheme;
use crate::error::FluxError;
use crate::nn::Parameters;
use crate::pipeline::{self, LatentGeometry, Manifest, PipelineRequest};
use crate::toy_train::{self, LrSchedule, ToyDataset, ToyVelocityNet, TrainConfig};
use crate::transformer::{self, linear_params, FluxTransformer, ModelConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rflux", version = env!("RFLUX_BUILD_DESCRIBE"), about = "Rectified-flow transformer toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the text-to-image pipeline and write a PPM plus manifest.
    Sample(SampleArgs),
    /// Train the 2-D toy velocity net and write a CSV report.
    TrainToy(TrainArgs),
    /// Print the architecture table and parameter count of a preset.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// key = value file with defaults for any flag below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// toy or flux-shape (the latter is inspect-only).
    #[arg(long)]
    pub preset: Option<String>,
    /// Write every intermediate latent to `<out>.latents.rfxw`.
    #[arg(long)]
    pub dump_latents: bool,
    /// dense (all weights random) or adaln-zero (identity blocks, zero head).
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub weights_seed: Option<u64>,
    /// Load transformer weights from a weight container instead.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gaussian, two-moons or mixture.
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gaussian mean as `x,y`.
    #[arg(long)]
    pub mu: Option<String>,
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Mixture component count.
    #[arg(long)]
    pub components: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// cosine or constant.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Generated samples used for endpoint statistics.
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub eval_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<FluxError> for CliError {
    fn from(e: FluxError) -> Self {
        let code = match e {
            FluxError::Io { .. } | FluxError::Format(_) => EXIT_IO,
            FluxError::Divergence { .. } | FluxError::NonFinite { .. } => EXIT_DIVERGENCE,
            _ => EXIT_USAGE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parsed `key = value` file.
#[derive(Debug, Default, Clone)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", n + 1)))?;
            let key = k.trim().replace('_', "-");
            let value = v.trim();
            let value = value
                .strip_prefix('"')
                .and_then(|s| s.strip_suffix('"'))
                .unwrap_or(value);
            values.insert(key, value.to_owned());
        }
        Ok(ConfigFile { values })
    }

    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        match path {
            None => Ok(ConfigFile::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError {
                    code: EXIT_IO,
                    message: format!("{}: {e}", p.display()),
                })?;
                Self::parse(&text)
            }
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> CliResult<()> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(CliError::usage(format!(
                "unknown config key `{k}` (allowed: {})",
                allowed.join(", ")
            ))),
            None => Ok(()),
        }
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::usage(format!("config key `{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    fn flag(&self, key: &str) -> CliResult<bool> {
        Ok(self.get::<bool>(key)?.unwrap_or(false))
    }
}

/// Flag, then file, then default.
fn pick<T: FromStr>(flag: Option<T>, file: &ConfigFile, key: &str, default: T) -> CliResult<T>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

struct Resolved(Vec<(&'static str, String)>);

impl Resolved {
    fn print(&self, command: &str, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "[{command}]")?;
        for (k, v) in &self.0 {
            writeln!(out, "{k} = {v}")?;
        }
        writeln!(out)
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError {
        code: EXIT_IO,
        message: format!("stdout: {e}"),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out` and diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::Sample(a) => cmd_sample(&a, out),
        Command::TrainToy(a) => cmd_train_toy(&a, out),
        Command::Inspect(a) => cmd_inspect(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn cmd_sample(a: &SampleArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(&[
        "prompt",
        "width",
        "height",
        "steps",
        "guidance",
        "seed",
        "out",
        "preset",
        "dump-latents",
        "init",
        "weights-seed",
        "weights",
    ])?;
    let req = PipelineRequest {
        prompt: pick(a.prompt.clone(), &file, "prompt", String::new())?,
        guidance_scale: pick(a.guidance, &file, "guidance", 3.5)?,
        num_inference_steps: pick(a.steps, &file, "steps", 4)?,
        width: pick(a.width, &file, "width", 64)?,
        height: pick(a.height, &file, "height", 64)?,
        seed: pick(a.seed, &file, "seed", 0)?,
    };
    let out_path: PathBuf = pick(a.out.clone(), &file, "out", PathBuf::from("sample.ppm"))?;
    let preset: String = pick(a.preset.clone(), &file, "preset", "toy".to_owned())?;
    let init_name: String = pick(a.init.clone(), &file, "init", "dense".to_owned())?;
    let weights_seed: u64 = pick(a.weights_seed, &file, "weights-seed", 0)?;
    let weights: Option<PathBuf> = match &a.weights {
        Some(p) => Some(p.clone()),
        None => file.get("weights")?,
    };
    let dump = a.dump_latents || file.flag("dump-latents")?;

    let mut resolved = vec![
        ("prompt", format!("{:?}", req.prompt)),
        ("width", req.width.to_string()),
        ("height", req.height.to_string()),
        ("steps", req.num_inference_steps.to_string()),
        ("guidance", format!("{}", req.guidance_scale)),
        ("seed", req.seed.to_string()),
        ("out", out_path.display().to_string()),
        ("preset", preset.clone()),
        ("init", init_name.clone()),
        ("weights-seed", weights_seed.to_string()),
    ];
    if let Some(w) = &weights {
        resolved.push(("weights", w.display().to_string()));
    }
    resolved.push(("dump-latents", dump.to_string()));
    Resolved(resolved).print("sample", out).map_err(io_err)?;

    let cfg = match preset.as_str() {
        "toy" => ModelConfig::toy(),
        "flux-shape" | "flux" => {
            return Err(CliError::usage(
                "preset flux-shape is inspect-only; sampling supports --preset toy",
            ))
        }
        other => return Err(CliError::usage(format!("unknown preset `{other}`"))),
    };
    let init = parse_init(&init_name)?;
    LatentGeometry::new(req.width, req.height, &cfg)?;
    if req.num_inference_steps == 0 {
        return Err(CliError::usage("--steps must be >= 1"));
    }
    let model = match &weights {
        Some(p) => FluxTransformer::load(cfg.clone(), p)?,
        None => FluxTransformer::new(cfg.clone(), init, weights_seed)?,
    };
    let mut extra = vec![("init", init_name), ("weights-seed", weights_seed.to_string())];
    if let Some(w) = &weights {
        extra.push(("weights", w.display().to_string()));
    }
    let grid = crate::rf_math::make_time_grid(req.num_inference_steps)?;
    for (i, (&t, lvl)) in grid.times().iter().zip(grid.noise_levels()).enumerate() {
        writeln!(out, "step {i}: s={t:.6} noise_level={lvl:.6}").map_err(io_err)?;
    }
    let manifest = Manifest::for_request(&req, &preset, &extra);
    let outputs = pipeline::run_to_files(&req, &model, &cfg, &out_path, &manifest, dump)?;
    writeln!(out, "image: {}", outputs.image.display()).map_err(io_err)?;
    writeln!(out, "manifest: {}", outputs.manifest.display()).map_err(io_err)?;
    if let Some(p) = &outputs.latents {
        writeln!(out, "latents: {}", p.display()).map_err(io_err)?;
    }
    writeln!(out, "ppm_fnv1a: {:016x}", outputs.ppm_hash).map_err(io_err)?;
    Ok(())
}

fn parse_init(name: &str) -> CliResult<InitScheme> {
    match name {
        "dense" => Ok(InitScheme::Dense),
        "adaln-zero" | "zero" => Ok(InitScheme::AdaLnZero),
        other => Err(CliError::usage(format!(
            "unknown init `{other}` (expected dense or adaln-zero)"
        ))),
    }
}

fn parse_mu(text: &str) -> CliResult<[f64; 2]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [x, y] => match (x.parse(), y.parse()) {
            (Ok(x), Ok(y)) => Ok([x, y]),
            _ => Err(CliError::usage(format!("--mu `{text}` is not `x,y`"))),
        },
        _ => Err(CliError::usage(format!("--mu `{text}` is not `x,y`"))),
    }
}

pub fn cmd_train_toy(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(&[
        "dataset",
        "steps",
        "lr",
        "batch",
        "seed",
        "out",
        "mu",
        "sigma",
        "components",
        "hidden",
        "schedule",
        "eval-samples",
        "eval-steps",
    ])?;
    let defaults = TrainConfig::default();
    let dataset_name: String = pick(a.dataset.clone(), &file, "dataset", "gaussian".to_owned())?;
    let mu_text: String = pick(a.mu.clone(), &file, "mu", "3,0".to_owned())?;
    let sigma: f64 = pick(a.sigma, &file, "sigma", 1.0)?;
    let components: usize = pick(a.components, &file, "components", 8)?;
    let hidden: usize = pick(a.hidden, &file, "hidden", 64)?;
    let schedule_name: String = pick(a.schedule.clone(), &file, "schedule", "cosine".to_owned())?;
    let cfg = TrainConfig {
        steps: pick(a.steps, &file, "steps", defaults.steps)?,
        lr: pick(a.lr, &file, "lr", defaults.lr)?,
        batch: pick(a.batch, &file, "batch", defaults.batch)?,
        seed: pick(a.seed, &file, "seed", defaults.seed)?,
        schedule: match schedule_name.as_str() {
            "cosine" => LrSchedule::Cosine,
            "constant" => LrSchedule::Constant,
            other => {
                return Err(CliError::usage(format!(
                    "unknown schedule `{other}` (expected cosine or constant)"
                )))
            }
        },
    };
    let out_path: PathBuf = pick(a.out.clone(), &file, "out", PathBuf::from("train.csv"))?;
    let eval_samples: usize = pick(a.eval_samples, &file, "eval-samples", 4096)?;
    let eval_steps: usize = pick(a.eval_steps, &file, "eval-steps", 64)?;

    let mut resolved = vec![("dataset", dataset_name.clone())];
    if dataset_name == "gaussian" {
        resolved.push(("mu", mu_text.clone()));
        resolved.push(("sigma", format!("{sigma}")));
    }
    if dataset_name == "mixture" {
        resolved.push(("components", components.to_string()));
    }
    resolved.extend([
        ("steps", cfg.steps.to_string()),
        ("lr", format!("{}", cfg.lr)),
        ("batch", cfg.batch.to_string()),
        ("seed", cfg.seed.to_string()),
        ("schedule", schedule_name.clone()),
        ("hidden", hidden.to_string()),
        ("eval-samples", eval_samples.to_string()),
        ("eval-steps", eval_steps.to_string()),
        ("out", out_path.display().to_string()),
    ]);
    Resolved(resolved).print("train-toy", out).map_err(io_err)?;

    let dataset = match dataset_name.as_str() {
        "gaussian" => ToyDataset::gaussian(parse_mu(&mu_text)?, sigma)?,
        "two-moons" | "two_moons" | "moons" => ToyDataset::two_moons(),
        "mixture" => ToyDataset::mixture(components)?,
        other => {
            return Err(CliError::usage(format!(
                "unknown dataset `{other}` (expected gaussian, two-moons or mixture)"
            )))
        }
    };
    if eval_samples == 0 || eval_steps == 0 {
        return Err(CliError::usage("--eval-samples and --eval-steps must be >= 1"));
    }
    let mut net = ToyVelocityNet::new(hidden, 16, cfg.seed)?;
    let mut report = toy_train::train(&dataset, &mut net, &cfg)?;
    let stats = toy_train::generate_and_score(&net, eval_samples, eval_steps, cfg.seed)?;
    report.gap_table =
        toy_train::refinement_gaps(&net, eval_samples.min(1024), &[2, 4, 8, 16, 32], 128, cfg.seed)?;
    let (data_mean, data_cov) = dataset.moments();
    report
        .metadata
        .push(("data_mean".into(), format!("{:?},{:?}", data_mean[0], data_mean[1])));
    report.metadata.push((
        "data_cov".into(),
        format!(
            "{:?},{:?},{:?},{:?}",
            data_cov[0][0], data_cov[0][1], data_cov[1][0], data_cov[1][1]
        ),
    ));
    report.endpoints = Some(stats.clone());
    report.write_csv(&out_path)?;

    let w = 100.min(report.losses.len());
    writeln!(out, "initial_window_loss: {:.6}", report.initial_window_mean(w)).map_err(io_err)?;
    writeln!(out, "final_window_loss: {:.6}", report.final_window_mean(w)).map_err(io_err)?;
    writeln!(out, "endpoint_mean: {:.4},{:.4}", stats.mean[0], stats.mean[1]).map_err(io_err)?;
    writeln!(out, "straightness: {:.6}", stats.straightness).map_err(io_err)?;
    writeln!(out, "report: {}", out_path.display()).map_err(io_err)?;
    Ok(())
}

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRow {
    pub module: String,
    pub shape: String,
    pub params: u64,
}

fn row(module: impl Into<String>, shape: impl Into<String>, params: u64) -> TableRow {
    TableRow {
        module: module.into(),
        shape: shape.into(),
        params,
    }
}

fn lin_row(module: &str, d_in: usize, d_out: usize) -> TableRow {
    row(module, format!("{d_in} -> {d_out}"), linear_params(d_in, d_out))
}

/// Module-by-module shapes and parameter counts derived from the config
/// alone; per-block rows are for a single block.
pub fn architecture_table(cfg: &ModelConfig) -> Vec<TableRow> {
    let d = cfg.d_model;
    let h = cfg.hidden();
    let dh = cfg.d_head();
    let qk = if cfg.qk_norm { 2 * dh as u64 } else { 0 };
    let e = cfg.scalar_embed_dim;
    let mut rows = vec![
        lin_row("x_embedder", cfg.in_channels(), d),
        lin_row("context_embedder", cfg.text_token_dim, d),
        row("timestep_embedder", format!("{e} -> {d} -> {d}"), linear_params(e, d) + linear_params(d, d)),
        row("guidance_embedder", format!("{e} -> {d} -> {d}"), linear_params(e, d) + linear_params(d, d)),
        row(
            "pooled_text_embedder",
            format!("{} -> {d} -> {d}", cfg.pooled_dim),
            linear_params(cfg.pooled_dim, d) + linear_params(d, d),
        ),
    ];
    for stream in ["img", "txt"] {
        rows.push(lin_row(&format!("double.{stream}.norm1 (shift,scale,gate x2)"), d, 6 * d));
        rows.push(row(
            format!("double.{stream}.attn.to_q/to_k/to_v"),
            format!("3 x {d} -> {d}"),
            3 * linear_params(d, d),
        ));
        if cfg.qk_norm {
            rows.push(row(format!("double.{stream}.attn.qk_norm"), format!("2 x {dh}"), qk));
        }
        rows.push(lin_row(&format!("double.{stream}.attn.to_out"), d, d));
        rows.push(row(
            format!("double.{stream}.ff"),
            format!("{d} -> {h} -> {d}"),
            linear_params(d, h) + linear_params(h, d),
        ));
    }
    rows.push(lin_row("single.norm (shift,scale,gate)", d, 3 * d));
    rows.push(row("single.attn.to_q/to_k/to_v", format!("3 x {d} -> {d}"), 3 * linear_params(d, d)));
    if cfg.qk_norm {
        rows.push(row("single.attn.qk_norm", format!("2 x {dh}"), qk));
    }
    rows.push(lin_row("single.mlp_in", d, h));
    rows.push(lin_row("single.proj_out", d + h, d));
    rows.push(lin_row("norm_out (shift,scale)", d, 2 * d));
    rows.push(lin_row("proj_out", d, cfg.in_channels()));
    rows
}

fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// Full `inspect` report for a config.
pub fn inspect_report(preset: &str, cfg: &ModelConfig) -> String {
    let b = transformer::param_breakdown(cfg);
    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line(format!("preset: {preset}"));
    line(format!("d_model: {}", cfg.d_model));
    line(format!("n_heads: {}", cfg.n_heads));
    line(format!("d_head: {}", cfg.d_head()));
    line(format!("n_double: {}", cfg.n_double));
    line(format!("n_single: {}", cfg.n_single));
    line(format!("mlp_hidden: {}", cfg.hidden()));
    line(format!(
        "rope_axes: {},{},{} (theta {})",
        cfg.rope.axis_dims[0], cfg.rope.axis_dims[1], cfg.rope.axis_dims[2], cfg.rope.theta
    ));
    line(format!(
        "in_channels: {} ({} latent channels x patch {}^2)",
        cfg.in_channels(),
        cfg.latent_channels,
        cfg.patch
    ));
    line(format!("text_tokens: {} x {}", cfg.n_txt, cfg.text_token_dim));
    line(format!("pooled_dim: {}", cfg.pooled_dim));
    line(String::new());
    line(format!("{:<44} {:>24} {:>16}", "module", "shape", "params"));
    for r in architecture_table(cfg) {
        line(format!("{:<44} {:>24} {:>16}", r.module, r.shape, group_digits(r.params)));
    }
    line(String::new());
    line("block types:".into());
    line(format!(
        "  double-stream x{:<3} {:>16} per block  separate image/text weights, joint attention over both streams, AdaLN-Zero modulation",
        cfg.n_double,
        group_digits(b.per_double_block)
    ));
    line(format!(
        "  single-stream x{:<3} {:>16} per block  shared weights over the concatenated sequence, attention and MLP in parallel",
        cfg.n_single,
        group_digits(b.per_single_block)
    ));
    line(String::new());
    line(format!("embedders: {}", group_digits(b.input_projections + b.conditioning)));
    line(format!("double_stack: {}", group_digits(b.per_double_block * cfg.n_double as u64)));
    line(format!("single_stack: {}", group_digits(b.per_single_block * cfg.n_single as u64)));
    line(format!("final_layer: {}", group_digits(b.final_layer)));
    line(format!("total_params: {}", b.total()));
    line(format!("total_params_billions: {:.3}", b.total() as f64 / 1e9));
    s
}

pub fn cmd_inspect(a: &InspectArgs, out: &mut dyn Write) -> CliResult<()> {
    let file = ConfigFile::load(a.config.as_deref())?;
    file.check_keys(&["preset"])?;
    let preset: String = pick(a.preset.clone(), &file, "preset", "toy".to_owned())?;
    Resolved(vec![("preset", preset.clone())])
        .print("inspect", out)
        .map_err(io_err)?;
    let cfg = ModelConfig::preset(&preset)?;
    cfg.validate()?;
    write!(out, "{}", inspect_report(&preset, &cfg)).map_err(io_err)?;
    Ok(())
}

/// Parameter count of an allocated model, for cross-checking the table.
pub fn enumerated_params(model: &FluxTransformer) -> u64 {
    model.param_count() as u64
}
