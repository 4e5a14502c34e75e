//! Rectified-flow training on 2-D toy distributions.
//!
//! The velocity net is a small GELU MLP over `(x, sinusoidal(t·1000))`
//! with a hand-written backward pass and Adam. For Gaussian data the
//! exact marginal velocity is available in closed form, which gives an
//! oracle both for the trained net and for the sampler.

use std::fmt::Write as _;
use std::path::Path;

use crate::embeddings::{sinusoidal_embed, MAX_PERIOD, TIMESTEP_SCALE};
use crate::error::{FluxError, Result};
use crate::nn::{join, Adam, Linear, Parameters};
use crate::numerics::{gelu, gelu_with_grad, randn};
use crate::rf_math::{make_time_grid, rf_loss, rf_loss_grad};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Batch losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub enum ToyDataset {
    Gaussian { mu: [f64; 2], sigma: f64 },
    /// Two interleaved half circles with isotropic jitter.
    TwoMoons { noise: f64 },
    /// `k` equal-weight Gaussians on a circle.
    Mixture { k: usize, radius: f64, sigma: f64 },
}

impl ToyDataset {
    pub fn gaussian(mu: [f64; 2], sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() || !mu.iter().all(|m| m.is_finite()) {
            return Err(FluxError::Domain(format!(
                "gaussian dataset needs finite mu and sigma > 0, got {mu:?}, {sigma}"
            )));
        }
        Ok(ToyDataset::Gaussian { mu, sigma })
    }

    pub fn two_moons() -> Self {
        ToyDataset::TwoMoons { noise: 0.1 }
    }

    pub fn mixture(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(FluxError::Domain("mixture needs k >= 1".into()));
        }
        Ok(ToyDataset::Mixture {
            k,
            radius: 2.0,
            sigma: 0.2,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ToyDataset::Gaussian { .. } => "gaussian",
            ToyDataset::TwoMoons { .. } => "two-moons",
            ToyDataset::Mixture { .. } => "mixture",
        }
    }

    fn mixture_center(i: usize, k: usize, radius: f64) -> [f64; 2] {
        let a = std::f64::consts::TAU * i as f64 / k as f64;
        [radius * libm::cos(a), radius * libm::sin(a)]
    }

    /// `n` samples as an `[n × 2]` tensor.
    pub fn sample(&self, rng: &mut Rng, n: usize) -> Tensor {
        let mut out = Tensor::zeros([n, 2]);
        for i in 0..n {
            let p = match *self {
                ToyDataset::Gaussian { mu, sigma } => {
                    [mu[0] + sigma * rng.normal(), mu[1] + sigma * rng.normal()]
                }
                ToyDataset::TwoMoons { noise } => {
                    let theta = std::f64::consts::PI * rng.uniform();
                    let (c, s) = (libm::cos(theta), libm::sin(theta));
                    let base = if rng.below(2) == 0 {
                        [c, s]
                    } else {
                        [1.0 - c, 0.5 - s]
                    };
                    [base[0] + noise * rng.normal(), base[1] + noise * rng.normal()]
                }
                ToyDataset::Mixture { k, radius, sigma } => {
                    let m = Self::mixture_center(rng.below(k), k, radius);
                    [m[0] + sigma * rng.normal(), m[1] + sigma * rng.normal()]
                }
            };
            out.row_mut(i).copy_from_slice(&p);
        }
        out
    }

    /// Mean and covariance of the distribution. Exact for the Gaussian
    /// and the mixture; a 10⁶-sample estimate for the moons.
    pub fn moments(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        match *self {
            ToyDataset::Gaussian { mu, sigma } => {
                let v = sigma * sigma;
                (mu, [[v, 0.0], [0.0, v]])
            }
            ToyDataset::Mixture { k, radius, sigma } => {
                let centers: Vec<[f64; 2]> =
                    (0..k).map(|i| Self::mixture_center(i, k, radius)).collect();
                let kf = k as f64;
                let m = [
                    centers.iter().map(|c| c[0]).sum::<f64>() / kf,
                    centers.iter().map(|c| c[1]).sum::<f64>() / kf,
                ];
                let mut cov = [[sigma * sigma, 0.0], [0.0, sigma * sigma]];
                for c in &centers {
                    for a in 0..2 {
                        for b in 0..2 {
                            cov[a][b] += (c[a] - m[a]) * (c[b] - m[b]) / kf;
                        }
                    }
                }
                (m, cov)
            }
            ToyDataset::TwoMoons { .. } => {
                let s = self.sample(&mut Rng::new(0x6d6f6f6e), 1_000_000);
                moments_of(&s)
            }
        }
    }
}

/// Sample mean and (population) covariance of an `[n × 2]` tensor.
pub fn moments_of(points: &Tensor) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = points.rows().max(1) as f64;
    let mut m = [0.0; 2];
    for i in 0..points.rows() {
        let r = points.row(i);
        m[0] += r[0];
        m[1] += r[1];
    }
    m = [m[0] / n, m[1] / n];
    let mut c = [[0.0; 2]; 2];
    for i in 0..points.rows() {
        let r = points.row(i);
        let d = [r[0] - m[0], r[1] - m[1]];
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += d[a] * d[b] / n;
            }
        }
    }
    (m, c)
}

/// A time-dependent vector field on R².
pub trait VelocityField {
    /// Velocities for an `[n × 2]` batch at shared time `t`.
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Exact marginal velocity `E[x₁ − x₀ | x_t = x]` for
/// `x₀ ~ N(0, I)`, `x₁ ~ N(μ, σ²I)` drawn independently:
///
/// `v = μ + (tσ² − (1 − t)) / ((1 − t)² + t²σ²) · (x − tμ)`
pub fn gaussian_oracle_velocity(x: [f64; 2], t: f64, mu: [f64; 2], sigma: f64) -> Result<[f64; 2]> {
    if !(0.0..1.0).contains(&t) {
        return Err(FluxError::Domain(format!("oracle time {t} outside [0, 1)")));
    }
    if !(sigma > 0.0) {
        return Err(FluxError::Domain(format!("oracle sigma {sigma} must be > 0")));
    }
    let var = (1.0 - t) * (1.0 - t) + t * t * sigma * sigma;
    let k = (t * sigma * sigma - (1.0 - t)) / var;
    Ok([
        mu[0] + k * (x[0] - t * mu[0]),
        mu[1] + k * (x[1] - t * mu[1]),
    ])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianOracle {
    pub mu: [f64; 2],
    pub sigma: f64,
}

impl VelocityField for GaussianOracle {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let mut out = Tensor::zeros([x.rows(), 2]);
        for i in 0..x.rows() {
            let r = x.row(i);
            let v = gaussian_oracle_velocity([r[0], r[1]], t, self.mu, self.sigma)?;
            out.row_mut(i).copy_from_slice(&v);
        }
        Ok(out)
    }
}

/// One bin of a Monte-Carlo conditional-mean estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinEstimate {
    /// Mean position of the samples that fell in the bin.
    pub x: [f64; 2],
    /// Mean of `x₁ − x₀` over those samples.
    pub v: [f64; 2],
    pub count: usize,
}

/// Estimates `E[x₁ − x₀ | x_t]` by drawing `samples` independent pairs
/// and binning `x_t` on a square grid of width `bin` over the unit disk
/// centred at `E[x_t] = tμ`. Bins with fewer than `min_count` hits are
/// dropped.
pub fn monte_carlo_field(
    mu: [f64; 2],
    sigma: f64,
    t: f64,
    samples: usize,
    bin: f64,
    min_count: usize,
    rng: &mut Rng,
) -> Vec<BinEstimate> {
    let center = [t * mu[0], t * mu[1]];
    let n_side = (2.0 / bin).ceil() as usize;
    let mut acc = vec![([0.0f64; 2], [0.0f64; 2], 0usize); n_side * n_side];
    for _ in 0..samples {
        let x0 = [rng.normal(), rng.normal()];
        let x1 = [mu[0] + sigma * rng.normal(), mu[1] + sigma * rng.normal()];
        let xt = [
            (1.0 - t) * x0[0] + t * x1[0] - center[0],
            (1.0 - t) * x0[1] + t * x1[1] - center[1],
        ];
        if xt[0] * xt[0] + xt[1] * xt[1] > 1.0 {
            continue;
        }
        let ix = (((xt[0] + 1.0) / bin) as usize).min(n_side - 1);
        let iy = (((xt[1] + 1.0) / bin) as usize).min(n_side - 1);
        let cell = &mut acc[iy * n_side + ix];
        for a in 0..2 {
            cell.0[a] += xt[a] + center[a];
            cell.1[a] += x1[a] - x0[a];
        }
        cell.2 += 1;
    }
    acc.into_iter()
        .filter(|c| c.2 >= min_count.max(1))
        .map(|(xs, vs, n)| {
            let nf = n as f64;
            BinEstimate {
                x: [xs[0] / nf, xs[1] / nf],
                v: [vs[0] / nf, vs[1] / nf],
                count: n,
            }
        })
        .collect()
}

/// RMS distance between the closed-form field and binned Monte-Carlo
/// estimates, evaluated at each bin's sample-mean position.
pub fn oracle_rms_vs_monte_carlo(
    mu: [f64; 2],
    sigma: f64,
    t: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let bins = monte_carlo_field(mu, sigma, t, samples, 0.1, 100, &mut Rng::new(seed));
    if bins.is_empty() {
        return Err(FluxError::Domain("no populated bins".into()));
    }
    let mut se = 0.0;
    for b in &bins {
        let v = gaussian_oracle_velocity(b.x, t, mu, sigma)?;
        se += (v[0] - b.v[0]).powi(2) + (v[1] - b.v[1]).powi(2);
    }
    Ok((se / bins.len() as f64).sqrt())
}

/// Points of a `step`-spaced grid inside the unit disk centred at `c`.
pub fn disk_grid(c: [f64; 2], step: f64) -> Tensor {
    let n = (1.0 / step).floor() as i64;
    let mut pts = Vec::new();
    for iy in -n..=n {
        for ix in -n..=n {
            let (x, y) = (ix as f64 * step, iy as f64 * step);
            if x * x + y * y <= 1.0 + 1e-12 {
                pts.push([c[0] + x, c[1] + y]);
            }
        }
    }
    Tensor::from_rows(&pts)
}

/// RMS of `|a(x, t) − b(x, t)|` over `points` and `times`.
pub fn field_rms_error(
    a: &dyn VelocityField,
    b: &dyn VelocityField,
    points: &Tensor,
    times: &[f64],
) -> Result<f64> {
    let mut se = 0.0;
    let mut n = 0usize;
    for &t in times {
        let d = a.eval(points, t)?.sub(&b.eval(points, t)?)?;
        se += d.dot(&d)?;
        n += points.rows();
    }
    Ok((se / n.max(1) as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// `[x, emb(t)] → gelu(fc1) → gelu(fc2) → fc3 ∈ R²`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyVelocityNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc3: Linear,
    pub t_dim: usize,
}

#[derive(Debug, Clone)]
pub struct ToyCache {
    input: Tensor,
    act1: Tensor,
    slope1: Tensor,
    act2: Tensor,
    slope2: Tensor,
}

impl ToyVelocityNet {
    pub fn new(hidden: usize, t_dim: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || t_dim == 0 || !t_dim.is_multiple_of(2) {
            return Err(FluxError::Config(format!(
                "toy net needs hidden >= 1 and even t_dim, got {hidden}, {t_dim}"
            )));
        }
        let mut rng = Rng::new(seed);
        Ok(ToyVelocityNet {
            fc1: Linear::uniform(2 + t_dim, hidden, &mut rng),
            fc2: Linear::uniform(hidden, hidden, &mut rng),
            fc3: Linear::uniform(hidden, 2, &mut rng),
            t_dim,
        })
    }

    fn features(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        x.expect_shape("toy net input", &[t.len(), 2])?;
        let width = 2 + self.t_dim;
        let mut out = Tensor::zeros([t.len(), width]);
        for (i, &ti) in t.iter().enumerate() {
            let e = sinusoidal_embed(ti * TIMESTEP_SCALE, self.t_dim, MAX_PERIOD)?;
            let row = out.row_mut(i);
            row[..2].copy_from_slice(x.row(i));
            row[2..].copy_from_slice(e.data());
        }
        Ok(out)
    }

    /// Velocities for `[n × 2]` positions with per-row times.
    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.forward_features(&self.features(x, t)?)
    }

    fn forward_features(&self, input: &Tensor) -> Result<Tensor> {
        let act1 = gelu(&self.fc1.forward(input)?);
        let act2 = gelu(&self.fc2.forward(&act1)?);
        self.fc3.forward(&act2)
    }

    pub fn forward_cached(&self, x: &Tensor, t: &[f64]) -> Result<(Tensor, ToyCache)> {
        let input = self.features(x, t)?;
        let (act1, slope1) = gelu_with_grad(&self.fc1.forward(&input)?);
        let (act2, slope2) = gelu_with_grad(&self.fc2.forward(&act1)?);
        let out = self.fc3.forward(&act2)?;
        Ok((
            out,
            ToyCache {
                input,
                act1,
                slope1,
                act2,
                slope2,
            },
        ))
    }

    /// Parameter gradients for upstream gradient `dy`.
    pub fn backward(&self, cache: &ToyCache, dy: &Tensor) -> Result<ToyVelocityNet> {
        let mut g = self.clone();
        g.zero_all();
        let d_act2 = self.fc3.backward(&cache.act2, dy, &mut g.fc3)?;
        let d_pre2 = d_act2.mul(&cache.slope2)?;
        let d_act1 = self.fc2.backward(&cache.act1, &d_pre2, &mut g.fc2)?;
        let d_pre1 = d_act1.mul(&cache.slope1)?;
        self.fc1.backward(&cache.input, &d_pre1, &mut g.fc1)?;
        Ok(g)
    }

    /// Rectified-flow loss on one batch and its parameter gradient.
    pub fn loss_and_grad(
        &self,
        x0: &Tensor,
        x1: &Tensor,
        t: &[f64],
    ) -> Result<(f64, ToyVelocityNet)> {
        let xt = interpolate_rows(x0, x1, t)?;
        let (v, cache) = self.forward_cached(&xt, t)?;
        let loss = rf_loss(&v, x0, x1)?;
        let grad = self.backward(&cache, &rf_loss_grad(&v, x0, x1)?)?;
        Ok((loss, grad))
    }

    pub fn loss(&self, x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<f64> {
        let xt = interpolate_rows(x0, x1, t)?;
        rf_loss(&self.forward(&xt, t)?, x0, x1)
    }
}

impl Parameters for ToyVelocityNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
        self.fc3.visit(&join(prefix, "fc3"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
        self.fc3.visit_mut(&join(prefix, "fc3"), f);
    }
}

impl VelocityField for ToyVelocityNet {
    fn eval(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.forward(x, &vec![t; x.rows()])
    }
}

/// `x_t` with a separate `t` per row.
pub fn interpolate_rows(x0: &Tensor, x1: &Tensor, t: &[f64]) -> Result<Tensor> {
    x0.expect_same_shape("interpolate_rows", x1)?;
    if x0.rows() != t.len() {
        return Err(FluxError::shape("interpolate_rows", &[x0.rows()], &[t.len()]));
    }
    let mut out = x0.clone();
    for (i, &ti) in t.iter().enumerate() {
        if !(0.0..=1.0).contains(&ti) {
            return Err(FluxError::Domain(format!("t = {ti} outside [0, 1]")));
        }
        for (o, &b) in out.row_mut(i).iter_mut().zip(x1.row(i)) {
            *o = (1.0 - ti) * *o + ti * b;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `lr` to zero.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                0.5 * (1.0 + libm::cos(std::f64::consts::PI * step as f64 / total.max(1) as f64))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            lr: 1e-3,
            batch: 256,
            seed: 0,
            schedule: LrSchedule::Cosine,
        }
    }
}

/// Endpoint statistics of generated samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointStats {
    pub n_samples: usize,
    pub steps: usize,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    /// Mean over paths of `path length / chord length − 1`.
    pub straightness: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss on a fixed probe batch, recorded before each update.
    pub losses: Vec<f64>,
    /// Loss on each step's training batch.
    pub batch_losses: Vec<f64>,
    pub endpoints: Option<EndpointStats>,
    /// `(steps, mean endpoint distance to the reference run)`.
    pub gap_table: Vec<(usize, f64)>,
    pub metadata: Vec<(String, String)>,
}

impl TrainReport {
    /// Mean of the first `w` recorded losses.
    pub fn initial_window_mean(&self, w: usize) -> f64 {
        window_mean(&self.losses[..w.min(self.losses.len())])
    }

    /// Mean of the last `w` recorded losses.
    pub fn final_window_mean(&self, w: usize) -> f64 {
        let n = self.losses.len();
        window_mean(&self.losses[n - w.min(n)..])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:?}");
        }
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "#{k}={v}");
        }
        if let Some(e) = &self.endpoints {
            let _ = writeln!(s, "#endpoint_samples={}", e.n_samples);
            let _ = writeln!(s, "#endpoint_steps={}", e.steps);
            let _ = writeln!(s, "#endpoint_mean={:?},{:?}", e.mean[0], e.mean[1]);
            let _ = writeln!(
                s,
                "#endpoint_cov={:?},{:?},{:?},{:?}",
                e.cov[0][0], e.cov[0][1], e.cov[1][0], e.cov[1][1]
            );
            let _ = writeln!(s, "#straightness={:?}", e.straightness);
        }
        for (steps, gap) in &self.gap_table {
            let _ = writeln!(s, "#gap_steps_{steps}={gap:?}");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| FluxError::io(path, e))
    }
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn uniform_times(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

/// Trains `net` in place with Adam on the rectified-flow objective.
pub fn train(dataset: &ToyDataset, net: &mut ToyVelocityNet, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.steps == 0 || cfg.batch == 0 || !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(FluxError::Config(format!(
            "train needs steps >= 1, batch >= 1 and lr >= 0, got {}, {}, {}",
            cfg.steps, cfg.batch, cfg.lr
        )));
    }
    let root = Rng::new(cfg.seed);
    let (mut data_rng, mut noise_rng, mut time_rng) =
        (root.fork("data"), root.fork("noise"), root.fork("time"));
    let mut probe_rng = root.fork("probe");
    let probe_x1 = dataset.sample(&mut probe_rng, cfg.batch);
    let probe_x0 = randn(&mut probe_rng, [cfg.batch, 2]);
    let probe_t = uniform_times(&mut probe_rng, cfg.batch);
    let probe_features = net.features(&interpolate_rows(&probe_x0, &probe_x1, &probe_t)?, &probe_t)?;

    let mut opt = Adam::new(cfg.lr, net.param_count());
    let mut params = net.flatten();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut batch_losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let probe = rf_loss(&net.forward_features(&probe_features)?, &probe_x0, &probe_x1)?;
        let x1 = dataset.sample(&mut data_rng, cfg.batch);
        let x0 = randn(&mut noise_rng, [cfg.batch, 2]);
        let t = uniform_times(&mut time_rng, cfg.batch);
        let (loss, grad) = net.loss_and_grad(&x0, &x1, &t)?;
        for l in [probe, loss] {
            if !l.is_finite() || l > DIVERGENCE_LOSS {
                return Err(FluxError::Divergence { step, loss: l });
            }
        }
        losses.push(probe);
        batch_losses.push(loss);
        opt.lr = cfg.lr * cfg.schedule.factor(step, cfg.steps);
        opt.update(&mut params, &grad.flatten());
        net.load_flat(&params);
    }
    Ok(TrainReport {
        losses,
        batch_losses,
        endpoints: None,
        gap_table: Vec::new(),
        metadata: vec![
            ("dataset".into(), dataset.name().into()),
            ("steps".into(), cfg.steps.to_string()),
            ("lr".into(), format!("{:?}", cfg.lr)),
            ("schedule".into(), format!("{:?}", cfg.schedule).to_lowercase()),
            ("batch".into(), cfg.batch.to_string()),
            ("seed".into(), cfg.seed.to_string()),
        ],
    })
}

/// Integrates `x0` along `field` on the uniform `steps` grid, returning
/// the endpoints and each path's polyline length.
pub fn integrate(field: &dyn VelocityField, x0: &Tensor, steps: usize) -> Result<(Tensor, Vec<f64>)> {
    let grid = make_time_grid(steps)?;
    let mut z = x0.clone();
    let mut lengths = vec![0.0; z.rows()];
    for (s, ds) in grid.steps() {
        let v = field.eval(&z, s)?;
        for (i, len) in lengths.iter_mut().enumerate() {
            let r = v.row(i);
            *len += ds * (r[0] * r[0] + r[1] * r[1]).sqrt();
        }
        z.axpy(ds, &v)?;
    }
    Ok((z, lengths))
}

/// Samples `n` noise points from `seed`, transports them with `steps`
/// Euler steps and summarises the endpoints.
pub fn generate_and_score(
    field: &dyn VelocityField,
    n_samples: usize,
    steps: usize,
    seed: u64,
) -> Result<EndpointStats> {
    let x0 = randn(&mut Rng::new(seed).fork("generate"), [n_samples, 2]);
    let (z, lengths) = integrate(field, &x0, steps)?;
    let (mean, cov) = moments_of(&z);
    let mut ratio_sum = 0.0;
    let mut counted = 0usize;
    for (i, len) in lengths.iter().enumerate() {
        let (a, b) = (x0.row(i), z.row(i));
        let chord = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        if chord > 1e-12 {
            ratio_sum += (len / chord - 1.0).max(0.0);
            counted += 1;
        }
    }
    Ok(EndpointStats {
        n_samples,
        steps,
        mean,
        cov,
        straightness: ratio_sum / counted.max(1) as f64,
    })
}

/// Mean endpoint distance between runs with each of `step_counts` and a
/// `reference_steps` run from the same noise.
pub fn refinement_gaps(
    field: &dyn VelocityField,
    n_samples: usize,
    step_counts: &[usize],
    reference_steps: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let x0 = randn(&mut Rng::new(seed).fork("generate"), [n_samples, 2]);
    let (reference, _) = integrate(field, &x0, reference_steps)?;
    step_counts
        .iter()
        .map(|&k| {
            let (z, _) = integrate(field, &x0, k)?;
            let d = z.sub(&reference)?;
            let mean = (0..d.rows())
                .map(|i| {
                    let r = d.row(i);
                    (r[0] * r[0] + r[1] * r[1]).sqrt()
                })
                .sum::<f64>()
                / d.rows().max(1) as f64;
            Ok((k, mean))
        })
        .collect()
}

/// Number of consecutive entries in `gaps` that strictly decrease.
pub fn decreasing_refinements(gaps: &[(usize, f64)]) -> usize {
    gaps.windows(2).filter(|w| w[1].1 < w[0].1).count()
}
