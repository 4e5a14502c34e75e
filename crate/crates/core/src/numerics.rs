//! Linear algebra, activations, normalization, seeded sampling and a
//! finite-difference gradient checker.
//!
//! Each differentiable primitive used by the models has its backward rule
//! next to its forward definition.

use crate::error::{FluxError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Default epsilon for [`layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// `[m×k] · [k×n]`. Each output entry accumulates its `k` products in
/// ascending order starting from zero.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(FluxError::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new([m, n], out)?.ensure_finite("matmul")
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(&a.transpose(), b)
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    matmul(a, &b.transpose())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    let d = a.last_dim();
    if d == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - max);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of [`softmax_rows`] given its output `p`.
pub fn softmax_rows_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let d = p.last_dim();
    let mut ds = dp.clone();
    for (i, row) in ds.data_mut().chunks_mut(d.max(1)).enumerate() {
        let prow = p.row(i);
        let inner: f64 = row.iter().zip(prow).map(|(g, p)| g * p).sum();
        for (g, &pv) in row.iter_mut().zip(prow) {
            *g = pv * (*g - inner);
        }
    }
    ds
}

/// Affine-free layer normalization over the last axis, using population
/// variance: `(x - mean) / sqrt(var + eps)`.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if d < 2 {
        return Err(FluxError::DegenerateAxis {
            op: "layer_norm",
            len: d,
        });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out.ensure_finite("layer_norm")
}

/// Backward of [`layer_norm`]. `x` is the forward input, `y` its output.
pub fn layer_norm_backward(x: &Tensor, y: &Tensor, dy: &Tensor, eps: f64) -> Tensor {
    let d = x.last_dim();
    let mut dx = dy.clone();
    for (i, row) in dx.data_mut().chunks_mut(d).enumerate() {
        let xr = x.row(i);
        let yr = y.row(i);
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let mean_g = row.iter().sum::<f64>() / d as f64;
        let mean_gy = row.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / d as f64;
        for (g, &yv) in row.iter_mut().zip(yr) {
            *g = inv * (*g - mean_g - yv * mean_gy);
        }
    }
    dx
}

// libm's tanh is several times slower than expm1 and dominates small MLPs.
fn fast_tanh(u: f64) -> f64 {
    if u > 20.0 {
        return 1.0;
    }
    let e = libm::expm1(2.0 * u);
    e / (e + 2.0)
}

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_K * x * x * x)))
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let th = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

/// Tanh-approximated GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

/// GELU values together with their derivatives, sharing one tanh per element.
pub fn gelu_with_grad(x: &Tensor) -> (Tensor, Tensor) {
    let mut y = x.clone();
    let mut g = x.clone();
    for (yv, gv) in y.data_mut().iter_mut().zip(g.data_mut()) {
        let x = *yv;
        let th = fast_tanh(GELU_C * (x + GELU_K * x * x * x));
        let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
        *yv = 0.5 * x * (1.0 + th);
        *gv = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    }
    (y, g)
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        *g *= gelu_grad_scalar(xv);
    }
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (g, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
        let s = sigmoid(xv);
        *g *= s * (1.0 + xv * (1.0 - s));
    }
    dx
}

/// `x · W + b` over the last axis of `x`; leading axes are treated as rows.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let din = x.last_dim();
    if w.rank() != 2 || w.shape()[0] != din || b.len() != w.shape()[1] {
        return Err(FluxError::shape("linear", x.shape(), w.shape()));
    }
    let dout = w.shape()[1];
    let rows = x.len().checked_div(din).unwrap_or(0);
    let x2 = Tensor::new([rows, din], x.data().to_vec())?;
    let y = matmul(&x2, w)?.add_row(b)?;
    let mut shape = x.shape().to_vec();
    match shape.last_mut() {
        Some(last) => *last = dout,
        None => shape.push(dout),
    }
    y.reshape(shape)?.ensure_finite("linear")
}

/// I.i.d. standard normals drawn from `rng` in row-major order.
pub fn randn(rng: &mut Rng, shape: impl Into<Vec<usize>>) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Uniform samples in `[-bound, bound]`.
pub fn rand_uniform(rng: &mut Rng, shape: impl Into<Vec<usize>>, bound: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound))
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Central-difference gradient check over every coordinate of `theta`.
///
/// Returns `max_i |a_i - n_i| / max(1e-8, |a_i| + |n_i|)` where `n_i` is
/// `(f(θ + h e_i) - f(θ - h e_i)) / 2h`.
pub fn grad_check<F>(f: F, theta: &Tensor, analytic: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let all: Vec<usize> = (0..theta.len()).collect();
    grad_check_at(f, theta, analytic, h, &all)
}

/// [`grad_check`] restricted to the listed coordinates.
pub fn grad_check_at<F>(
    mut f: F,
    theta: &Tensor,
    analytic: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    theta.expect_same_shape("grad_check", analytic)?;
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(FluxError::NonFinite { op: "grad_check" });
        }
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// [`grad_check_at`] with the Richardson-extrapolated central difference
/// `(4·D(h/2) − D(h)) / 3`, whose truncation error is `O(h⁴)`.
///
/// The larger usable `h` shrinks cancellation error, which matters when
/// some coordinates have gradients many orders below the loss value.
pub fn grad_check_richardson_at<F>(
    mut f: F,
    theta: &Tensor,
    analytic: &Tensor,
    h: f64,
    coords: &[usize],
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    theta.expect_same_shape("grad_check", analytic)?;
    let mut probe = theta.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        let mut central = |step: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + step;
            let plus = f(&probe)?;
            probe.data_mut()[i] = orig - step;
            let minus = f(&probe)?;
            probe.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(FluxError::NonFinite { op: "grad_check" });
            }
            Ok((plus - minus) / (2.0 * step))
        };
        let numeric = (4.0 * central(h / 2.0)? - central(h)?) / 3.0;
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_tracks_libm() {
        for i in -4000..=4000 {
            let u = i as f64 * 0.01;
            assert!((fast_tanh(u) - libm::tanh(u)).abs() < 4e-16, "{u}");
        }
        for u in [1e-300, -1e-12, 1e-8, 700.0, -700.0, f64::INFINITY, f64::NEG_INFINITY] {
            let (a, b) = (fast_tanh(u), libm::tanh(u));
            assert!((a - b).abs() <= 2.0 * f64::EPSILON * b.abs().max(f64::MIN_POSITIVE), "{u}: {a} {b}");
        }
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros([m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.get2(i, p) * b.get2(p, j);
                }
                out.data_mut()[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_dot() {
        let m = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &m).unwrap(), m);
        let r = matmul(&Tensor::from_rows(&[[1.0, 2.0]]), &Tensor::from_rows(&[[3.0], [4.0]]));
        assert_eq!(r.unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let mut rng = Rng::new(3);
        let a = randn(&mut rng, [3, 4]);
        let b = randn(&mut rng, [4, 2]);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let err = matmul(&Tensor::zeros([2, 3]), &Tensor::zeros([2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Tensor::from_rows(&[[0.0, 0.0], [1000.0, 1000.0]]));
        assert_eq!(p.data(), &[0.5, 0.5, 0.5, 0.5]);
        let p = softmax_rows(&Tensor::from_rows(&[[0.0, 3f64.ln()]]));
        assert!((p.data()[0] - 0.25).abs() < 1e-15);
        assert!((p.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&Tensor::from_rows(&[[1.0, 3.0]]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-10 && (y.data()[1] - 1.0).abs() < 1e-10);
        let y = layer_norm(&Tensor::from_rows(&[[5.0, 5.0, 5.0]]), LAYER_NORM_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
        let y = layer_norm(&Tensor::from_rows(&[[0.0, 1.0, 2.0]]), 1e-12).unwrap();
        let r = 1.5f64.sqrt();
        assert!((y.data()[0] + r).abs() < 1e-10);
        assert!(y.data()[1].abs() < 1e-12);
        assert!((y.data()[2] - r).abs() < 1e-10);
    }

    #[test]
    fn layer_norm_rejects_single_feature() {
        let err = layer_norm(&Tensor::from_rows(&[[1.0]]), 1e-6).unwrap_err();
        assert!(matches!(err, FluxError::DegenerateAxis { len: 1, .. }));
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let oracle = 0.5 * (1.0 + (c * (1.0 + 0.044715)).tanh());
        assert!((gelu_scalar(1.0) - oracle).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::from_rows(&[[1.0, -2.0]]);
        let y = linear(&x, &Tensor::eye(2), &Tensor::zeros([2])).unwrap();
        assert_eq!(y, x);
        let y = linear(
            &Tensor::from_rows(&[[1.0, 1.0]]),
            &Tensor::from_rows(&[[1.0], [1.0]]),
            &Tensor::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[3.0]);

        let mut rng = Rng::new(11);
        let x = randn(&mut rng, [3, 4]);
        let w = randn(&mut rng, [4, 5]);
        let b = randn(&mut rng, [5]);
        let y = linear(&x, &w, &b).unwrap();
        for i in 0..3 {
            let row = x.slice_rows(i..i + 1);
            let expect = naive_matmul(&row, &w).add_row(&b).unwrap();
            assert_eq!(y.row(i), expect.data());
        }
        assert!(linear(&x, &Tensor::zeros([3, 5]), &b).is_err());
    }

    #[test]
    fn linear_on_vectors_keeps_rank() {
        let y = linear(&Tensor::from_vec(vec![1.0, 2.0]), &Tensor::eye(2), &Tensor::zeros([2]));
        assert_eq!(y.unwrap().shape(), &[2]);
    }

    #[test]
    fn randn_determinism_and_moments() {
        let a = randn(&mut Rng::new(42), [64]);
        let b = randn(&mut Rng::new(42), [64]);
        assert_eq!(a.content_hash(), b.content_hash());
        let c = randn(&mut Rng::new(2), [64]);
        assert_ne!(randn(&mut Rng::new(1), [64]), c);

        let n = 100_000;
        let s = randn(&mut Rng::new(5), [n]);
        let mean = s.sum() / n as f64;
        let var = s.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn grad_check_examples() {
        let theta = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.0]);
        let sq = |t: &Tensor| Ok(t.dot(t).unwrap());
        let err = grad_check(sq, &theta, &theta.scale(2.0), 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");

        let sin_sum = |t: &Tensor| Ok(t.data().iter().map(|v| v.sin()).sum());
        let err = grad_check(sin_sum, &theta, &theta.map(f64::cos), 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");

        let err = grad_check(sq, &theta, &theta.scale(3.0), 1e-5).unwrap();
        assert!((err - 0.2).abs() < 1e-6, "{err}");
    }

    #[test]
    fn richardson_check_is_fourth_order() {
        let theta = Tensor::from_vec(vec![0.3, -1.2, 2.5]);
        let cubic = |t: &Tensor| Ok(t.data().iter().map(|v| v.powi(3)).sum());
        let g = theta.map(|v| 3.0 * v * v);
        let all = [0, 1, 2];
        // Plain central differences carry h²·f‴/6 = 1e-4 absolute error here.
        assert!(grad_check_at(cubic, &theta, &g, 1e-2, &all).unwrap() > 1e-6);
        assert!(grad_check_richardson_at(cubic, &theta, &g, 1e-2, &all).unwrap() < 1e-12);
        let exp_sum = |t: &Tensor| Ok(t.data().iter().map(|v| v.exp()).sum());
        let err = grad_check_richardson_at(exp_sum, &theta, &theta.map(f64::exp), 1e-2, &all).unwrap();
        assert!(err < 1e-9, "{err}");
        let err = grad_check_richardson_at(cubic, &theta, &g.scale(1.5), 1e-2, &all).unwrap();
        assert!((err - 0.2).abs() < 1e-9, "{err}");
    }

    #[test]
    fn grad_check_propagates_non_finite() {
        let theta = Tensor::from_vec(vec![1.0]);
        let f = |_: &Tensor| Ok(f64::NAN);
        assert!(grad_check(f, &theta, &theta, 1e-5).is_err());
    }

    #[test]
    fn primitive_backwards_match_finite_differences() {
        let mut rng = Rng::new(9);
        let x = randn(&mut rng, [3, 5]);
        let up = randn(&mut rng, [3, 5]);

        let ln = |t: &Tensor| layer_norm(t, 1e-6)?.dot(&up);
        let y = layer_norm(&x, 1e-6).unwrap();
        let g = layer_norm_backward(&x, &y, &up, 1e-6);
        assert!(grad_check(ln, &x, &g, 1e-5).unwrap() < 1e-6);

        let ge = |t: &Tensor| gelu(t).dot(&up);
        assert!(grad_check(ge, &x, &gelu_backward(&x, &up), 1e-5).unwrap() < 1e-6);

        let si = |t: &Tensor| silu(t).dot(&up);
        assert!(grad_check(si, &x, &silu_backward(&x, &up), 1e-5).unwrap() < 1e-6);

        let sm = |t: &Tensor| softmax_rows(t).dot(&up);
        let p = softmax_rows(&x);
        let g = softmax_rows_backward(&p, &up);
        assert!(grad_check(sm, &x, &g, 1e-5).unwrap() < 1e-6);
    }
}
