//! Rectified-flow and diffusion objectives, and the Euler sampler.
//!
//! Time convention: `s` runs from 0 (pure noise) to 1 (data). The noise level
//! shown to users is `1 - s`.

use std::f64::consts::FRAC_PI_2;

use crate::error::{FluxError, Result};
use crate::tensor::Tensor;

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(FluxError::Domain(format!(
            "interpolate: t = {t} outside [0, 1]"
        )));
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// The straight-path velocity `x1 - x0`, constant in t.
pub fn velocity_target(x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    x1.sub(x0)
}

fn mean_squared(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape("mse", b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Velocity objective, averaged over all elements.
pub fn rf_loss(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<f64> {
    let target = velocity_target(x0, x1)?;
    mean_squared(v_pred, &target)
}

/// Gradient of [`rf_loss`] with respect to `v_pred`.
pub fn rf_loss_grad(v_pred: &Tensor, x0: &Tensor, x1: &Tensor) -> Result<Tensor> {
    let target = velocity_target(x0, x1)?;
    let k = 2.0 / v_pred.len().max(1) as f64;
    v_pred.zip_map(&target, |v, y| k * (v - y))
}

/// Noise-prediction objective, averaged over all elements.
pub fn dm_epsilon_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<f64> {
    mean_squared(eps_pred, eps)
}

/// Cumulative signal levels `ᾱ_t` for integer `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
}

impl NoiseSchedule {
    pub const DEFAULT_STEPS: usize = 1000;

    /// `ᾱ_t = cos²(π/2 · t/T)`. The final entry is clamped to the smallest
    /// positive float so every entry stays in (0, 1].
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(FluxError::Domain("noise schedule needs T >= 1".into()));
        }
        let alphas = (0..=steps)
            .map(|t| {
                let c = libm::cos(FRAC_PI_2 * t as f64 / steps as f64);
                (c * c).max(f64::MIN_POSITIVE)
            })
            .collect();
        Ok(NoiseSchedule { alphas })
    }

    /// Builds a schedule from explicit values; they must start at 1, stay in
    /// (0, 1] and never increase.
    pub fn from_alphas(alphas: Vec<f64>) -> Result<Self> {
        let ok = alphas.len() >= 2
            && (alphas[0] - 1.0).abs() <= 1e-12
            && alphas.iter().all(|&a| a > 0.0 && a <= 1.0)
            && alphas.windows(2).all(|w| w[1] <= w[0]);
        if !ok {
            return Err(FluxError::Domain(
                "noise schedule must start at 1 and be non-increasing in (0, 1]".into(),
            ));
        }
        Ok(NoiseSchedule { alphas })
    }

    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> Option<f64> {
        self.alphas.get(t).copied()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine(Self::DEFAULT_STEPS).expect("non-zero default")
    }
}

/// `sqrt(ᾱ_t) x + sqrt(1 - ᾱ_t) eps`.
pub fn dm_forward_noise(
    x: &Tensor,
    eps: &Tensor,
    schedule: &NoiseSchedule,
    t: usize,
) -> Result<Tensor> {
    let a = schedule.alpha_bar(t).ok_or_else(|| {
        FluxError::Domain(format!(
            "diffusion timestep {t} outside [0, {}]",
            schedule.steps()
        ))
    })?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    x.zip_map(eps, |xv, ev| sa * xv + sn * ev)
}

/// `z + dt · v`.
pub fn euler_step(z: &Tensor, v: &Tensor, dt: f64) -> Result<Tensor> {
    if !(dt > 0.0) {
        return Err(FluxError::Domain(format!("euler_step: dt = {dt} must be > 0")));
    }
    z.zip_map(v, |a, b| a + dt * b)
}

/// Sampling times in `[0, 1)`, strictly ascending from 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Step sizes `s_{i+1} - s_i`, with the last step running to 1.
    ///
    /// For the uniform grid every difference is exact (Sterbenz), so the
    /// step sizes telescope to exactly 1.
    pub fn deltas(&self) -> Vec<f64> {
        self.times
            .iter()
            .enumerate()
            .map(|(i, &s)| self.times.get(i + 1).copied().unwrap_or(1.0) - s)
            .collect()
    }

    /// `(s, Δs)` pairs in integration order.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.times.iter().copied().zip(self.deltas())
    }

    /// Noise levels `1 - s`, running from 1 toward 0.
    pub fn noise_levels(&self) -> Vec<f64> {
        self.times.iter().map(|s| 1.0 - s).collect()
    }
}

/// Uniform grid `s_i = i / num_steps`, `i = 0 .. num_steps - 1`.
pub fn make_time_grid(num_steps: usize) -> Result<TimeGrid> {
    if num_steps < 1 {
        return Err(FluxError::Domain("num_steps must be at least 1".into()));
    }
    Ok(TimeGrid {
        times: (0..num_steps)
            .map(|i| i as f64 / num_steps as f64)
            .collect(),
    })
}
