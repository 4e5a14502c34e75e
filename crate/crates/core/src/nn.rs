//! Parameter containers shared by the transformer and the toy trainer.

use crate::error::Result;
use crate::numerics::{self, rand_uniform};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Anything owning named weight tensors.
///
/// Visiting order is fixed per type, so two instances with the same
/// structure (a model and its gradient buffer) line up entry by entry.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_owned(), t.clone())));
        out
    }

    /// All parameters concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Overwrites all parameters from a flat slice produced by [`flatten`](Self::flatten).
    fn load_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
    }

    fn zero_all(&mut self) {
        self.visit_mut("", &mut |_, t| t.fill(0.0));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_owned()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: [d_in × d_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros([d_in, d_out]),
            bias: Tensor::zeros([d_out]),
        }
    }

    /// Weights and bias uniform in `±1/sqrt(d_in)`.
    pub fn uniform(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Linear {
            weight: rand_uniform(rng, [d_in, d_out], bound),
            bias: rand_uniform(rng, [d_out], bound),
        }
    }

    pub fn identity(d: usize) -> Self {
        Linear {
            weight: Tensor::eye(d),
            bias: Tensor::zeros([d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        numerics::linear(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor, grad: &mut Linear) -> Result<Tensor> {
        let x2 = as_matrix(x, self.d_in())?;
        let dy2 = as_matrix(dy, self.d_out())?;
        grad.weight.add_assign(&numerics::matmul_tn(&x2, &dy2)?)?;
        grad.bias.add_assign(&dy2.sum_rows())?;
        numerics::matmul_nt(&dy2, &self.weight)?.reshape(x.shape().to_vec())
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Views any tensor as `[rows × d]`.
pub(crate) fn as_matrix(x: &Tensor, d: usize) -> Result<Tensor> {
    let rows = x.len().checked_div(d).unwrap_or(0);
    Tensor::new([rows, d], x.data().to_vec())
}

/// Adam moment buffers for one parameter set.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, randn};

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = Rng::new(21);
        let layer = Linear::uniform(4, 3, &mut rng);
        let x = randn(&mut rng, [5, 4]);
        let up = randn(&mut rng, [5, 3]);
        let mut grad = Linear::zeros(4, 3);
        let dx = layer.backward(&x, &up, &mut grad).unwrap();

        let fx = |t: &Tensor| layer.forward(t)?.dot(&up);
        assert!(grad_check(fx, &x, &dx, 1e-5).unwrap() < 1e-8);

        let fw = |w: &Tensor| {
            let l = Linear {
                weight: w.clone(),
                bias: layer.bias.clone(),
            };
            l.forward(&x)?.dot(&up)
        };
        assert!(grad_check(fw, &layer.weight, &grad.weight, 1e-5).unwrap() < 1e-8);
        let fb = |b: &Tensor| {
            let l = Linear {
                weight: layer.weight.clone(),
                bias: b.clone(),
            };
            l.forward(&x)?.dot(&up)
        };
        assert!(grad_check(fb, &layer.bias, &grad.bias, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn flatten_round_trips() {
        let mut rng = Rng::new(1);
        let a = Linear::uniform(3, 2, &mut rng);
        let mut b = Linear::zeros(3, 2);
        b.load_flat(&a.flatten());
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 8);
        let names: Vec<_> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["weight", "bias"]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut opt = Adam::new(0.1, 2);
        let mut p = [1.0, -1.0];
        opt.update(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }
}
