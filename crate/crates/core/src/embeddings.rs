//! Token identifiers, sinusoidal scalar embeddings and 3-axis rotary tables.

use crate::error::{FluxError, Result};
use crate::tensor::Tensor;

/// Scalars in `[0, 1]` (timestep, guidance) are multiplied by this before
/// sinusoidal embedding so they land on the familiar integer-timestep scale.
pub const TIMESTEP_SCALE: f64 = 1000.0;

/// Default `max_period` for [`sinusoidal_embed`].
pub const MAX_PERIOD: f64 = 10_000.0;

/// One `(t, h, w)` position triple per token.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenIds {
    rows: Vec<[i64; 3]>,
}

impl TokenIds {
    pub fn new(rows: Vec<[i64; 3]>) -> Self {
        TokenIds { rows }
    }

    pub fn rows(&self) -> &[[i64; 3]] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `self` followed by `other`.
    pub fn concat(&self, other: &TokenIds) -> TokenIds {
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        TokenIds { rows }
    }

    /// Every coordinate negated; the tables built from these undo a rotation.
    pub fn negated(&self) -> TokenIds {
        TokenIds {
            rows: self.rows.iter().map(|r| [-r[0], -r[1], -r[2]]).collect(),
        }
    }
}

/// Row-major enumeration of an image token grid: token `ĥ · w_grid + ŵ`
/// carries `(0, ĥ, ŵ)`.
pub fn build_img_ids(h_grid: usize, w_grid: usize) -> Result<TokenIds> {
    if h_grid == 0 || w_grid == 0 {
        return Err(FluxError::Geometry(format!(
            "token grid {h_grid}x{w_grid} must be at least 1x1"
        )));
    }
    let rows = (0..h_grid)
        .flat_map(|h| (0..w_grid).map(move |w| [0, h as i64, w as i64]))
        .collect();
    Ok(TokenIds { rows })
}

/// Text tokens all sit at the origin.
pub fn build_text_ids(n_text: usize) -> TokenIds {
    TokenIds {
        rows: vec![[0; 3]; n_text],
    }
}

/// `[cos(value·ω_0), …, cos(value·ω_{dim/2-1}), sin(value·ω_0), …]` with
/// `ω_j = max_period^(-2j/dim)`.
pub fn sinusoidal_embed(value: f64, dim: usize, max_period: f64) -> Result<Tensor> {
    if !dim.is_multiple_of(2) || dim == 0 {
        return Err(FluxError::Config(format!(
            "sinusoidal embedding width {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let freq = libm::pow(max_period, -2.0 * j as f64 / dim as f64);
        let angle = value * freq;
        out[j] = libm::cos(angle);
        out[half + j] = libm::sin(angle);
    }
    Ok(Tensor::from_vec(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    /// Rotary widths for the (t, h, w) axes.
    pub axis_dims: [usize; 3],
    pub theta: f64,
}

impl RopeConfig {
    pub fn new(axis_dims: [usize; 3], theta: f64) -> Self {
        RopeConfig { axis_dims, theta }
    }

    pub fn head_dim(&self) -> usize {
        self.axis_dims.iter().sum()
    }

    pub fn validate(&self, d_head: usize) -> Result<()> {
        if self.axis_dims.iter().any(|&d| d == 0 || d % 2 != 0) {
            return Err(FluxError::Config(format!(
                "rope axis dims {:?} must be even and positive",
                self.axis_dims
            )));
        }
        if self.head_dim() != d_head {
            return Err(FluxError::Config(format!(
                "rope axis dims {:?} sum to {}, head dim is {d_head}",
                self.axis_dims,
                self.head_dim()
            )));
        }
        if !(self.theta > 0.0) {
            return Err(FluxError::Config("rope theta must be positive".into()));
        }
        Ok(())
    }
}

/// Per-token cosine and sine rotation tables, `[n_tokens × d_head]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTables {
    pub cos: Tensor,
    pub sin: Tensor,
}

impl RopeTables {
    pub fn len(&self) -> usize {
        self.cos.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn head_dim(&self) -> usize {
        self.cos.last_dim()
    }

    /// Rows `range`, in the same token order.
    pub fn slice(&self, range: std::ops::Range<usize>) -> RopeTables {
        RopeTables {
            cos: self.cos.slice_rows(range.clone()),
            sin: self.sin.slice_rows(range),
        }
    }

    /// Hash of both tables' bits.
    pub fn content_hash(&self) -> u64 {
        self.cos.content_hash() ^ self.sin.content_hash().rotate_left(1)
    }
}

/// Builds interleaved rotary tables from token ids.
///
/// For axis `a` with width `D_a`, frequency `k < D_a/2` is
/// `θ^(-2k/D_a)` and the angle is `id_a · ω_k`. Each angle fills two
/// adjacent slots; the axis blocks are laid out in (t, h, w) order.
pub fn build_rope_tables(ids: &TokenIds, cfg: &RopeConfig) -> Result<RopeTables> {
    let d_head = cfg.head_dim();
    cfg.validate(d_head)?;
    let n = ids.len();
    let mut cos = Tensor::zeros([n, d_head]);
    let mut sin = Tensor::zeros([n, d_head]);
    let mut freqs = Vec::with_capacity(d_head / 2);
    for (axis, &dim) in cfg.axis_dims.iter().enumerate() {
        for k in 0..dim / 2 {
            freqs.push((axis, libm::pow(cfg.theta, -2.0 * k as f64 / dim as f64)));
        }
    }
    for (i, id) in ids.rows().iter().enumerate() {
        let crow = cos.row_mut(i);
        for (p, &(axis, freq)) in freqs.iter().enumerate() {
            let c = libm::cos(id[axis] as f64 * freq);
            crow[2 * p] = c;
            crow[2 * p + 1] = c;
        }
        let srow = sin.row_mut(i);
        for (p, &(axis, freq)) in freqs.iter().enumerate() {
            let s = libm::sin(id[axis] as f64 * freq);
            srow[2 * p] = s;
            srow[2 * p + 1] = s;
        }
    }
    Ok(RopeTables { cos, sin })
}

fn rotate(x: &Tensor, tables: &RopeTables, direction: f64) -> Result<Tensor> {
    let dh = tables.head_dim();
    if x.rows() != tables.len() || dh == 0 || !x.last_dim().is_multiple_of(dh) {
        return Err(FluxError::shape("apply_rope", x.shape(), tables.cos.shape()));
    }
    let mut out = x.clone();
    let d = x.last_dim();
    for i in 0..x.rows() {
        let (c, s) = (tables.cos.row(i), tables.sin.row(i));
        let row = &mut out.data_mut()[i * d..(i + 1) * d];
        for head in row.chunks_mut(dh) {
            for p in 0..dh / 2 {
                let (a, b) = (head[2 * p], head[2 * p + 1]);
                let (cv, sv) = (c[2 * p], direction * s[2 * p]);
                head[2 * p] = a * cv - b * sv;
                head[2 * p + 1] = a * sv + b * cv;
            }
        }
    }
    Ok(out)
}

/// Rotates each adjacent pair `(x_{2i}, x_{2i+1})` by the table angle.
///
/// `x` is `[n × d]` where `d` is a multiple of the table width; every head
/// slice receives the same rotation.
pub fn apply_rope(x: &Tensor, tables: &RopeTables) -> Result<Tensor> {
    rotate(x, tables, 1.0)
}

/// The inverse (and transpose) rotation of [`apply_rope`].
pub fn apply_rope_inverse(x: &Tensor, tables: &RopeTables) -> Result<Tensor> {
    rotate(x, tables, -1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::randn;
    use crate::rng::Rng;

    #[test]
    fn img_ids_enumerate_row_major() {
        assert_eq!(build_img_ids(1, 1).unwrap().rows(), &[[0, 0, 0]]);
        assert_eq!(
            build_img_ids(2, 2).unwrap().rows(),
            &[[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1]]
        );
        let ids = build_img_ids(4, 4).unwrap();
        assert_eq!(ids.len(), 16);
        assert_eq!(ids.rows()[15], [0, 3, 3]);
        assert!(build_img_ids(0, 3).is_err());
    }

    #[test]
    fn img_ids_are_a_bijection_onto_the_grid() {
        let (hg, wg) = (3, 5);
        let ids = build_img_ids(hg, wg).unwrap();
        let mut seen = std::collections::HashSet::new();
        for (i, r) in ids.rows().iter().enumerate() {
            assert_eq!(r[0], 0);
            assert_eq!(i as i64, r[1] * wg as i64 + r[2]);
            assert!(seen.insert((r[1], r[2])));
        }
        assert_eq!(seen.len(), hg * wg);
    }

    #[test]
    fn text_ids_are_zero() {
        assert!(build_text_ids(0).is_empty());
        assert_eq!(build_text_ids(3).rows(), &[[0; 3]; 3]);
        let t5 = build_text_ids(512);
        assert_eq!(t5.len(), 512);
        assert!(t5.rows().iter().all(|r| *r == [0, 0, 0]));
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_embed(0.0, 8, MAX_PERIOD).unwrap();
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let e = sinusoidal_embed(0.7, 2, MAX_PERIOD).unwrap();
        assert_eq!(e.data(), &[0.7f64.cos(), 0.7f64.sin()]);
        for &v in &[0.0, 1.0, 250.0, 999.0, -31.5] {
            let e = sinusoidal_embed(v, 16, MAX_PERIOD).unwrap();
            for j in 0..8 {
                let (c, s) = (e.data()[j], e.data()[8 + j]);
                assert!((c * c + s * s - 1.0).abs() < 1e-12);
            }
        }
        assert!(sinusoidal_embed(1.0, 7, MAX_PERIOD).is_err());
    }

    #[test]
    fn rope_tables_at_origin_are_identity() {
        let cfg = RopeConfig::new([4, 6, 6], 10_000.0);
        let t = build_rope_tables(&build_text_ids(3), &cfg).unwrap();
        assert!(t.cos.data().iter().all(|&c| c == 1.0));
        assert!(t.sin.data().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn rope_tables_single_frequency() {
        let cfg = RopeConfig::new([2, 2, 2], 10_000.0);
        let t = build_rope_tables(&TokenIds::new(vec![[1, 0, 0]]), &cfg).unwrap();
        assert_eq!(&t.cos.data()[..2], &[1f64.cos(), 1f64.cos()]);
        assert_eq!(&t.sin.data()[..2], &[1f64.sin(), 1f64.sin()]);
        assert_eq!(&t.cos.data()[2..], &[1.0; 4]);
        for (c, s) in t.cos.data().iter().zip(t.sin.data()) {
            assert!((c * c + s * s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_config_validation() {
        assert!(RopeConfig::new([4, 6, 6], 1e4).validate(16).is_ok());
        assert!(RopeConfig::new([4, 6, 6], 1e4).validate(18).is_err());
        assert!(RopeConfig::new([3, 7, 6], 1e4).validate(16).is_err());
    }

    #[test]
    fn quarter_turn() {
        let angle = std::f64::consts::FRAC_PI_2;
        let tables = RopeTables {
            cos: Tensor::from_rows(&[[angle.cos(), angle.cos()]]),
            sin: Tensor::from_rows(&[[angle.sin(), angle.sin()]]),
        };
        let y = apply_rope(&Tensor::from_rows(&[[1.0, 0.0]]), &tables).unwrap();
        assert!(y.data()[0].abs() < 1e-12 && (y.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_preserves_norm_and_inverts() {
        let cfg = RopeConfig::new([4, 6, 6], 10_000.0);
        let ids = build_img_ids(3, 4).unwrap();
        let tables = build_rope_tables(&ids, &cfg).unwrap();
        let x = randn(&mut Rng::new(1), [12, 32]);
        let y = apply_rope(&x, &tables).unwrap();
        for i in 0..12 {
            let (a, b): (f64, f64) = (
                x.row(i).iter().map(|v| v * v).sum(),
                y.row(i).iter().map(|v| v * v).sum(),
            );
            assert!((a.sqrt() - b.sqrt()).abs() < 1e-10);
        }
        let back = build_rope_tables(&ids.negated(), &cfg).unwrap();
        assert!(apply_rope(&y, &back).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
        assert!(apply_rope_inverse(&y, &tables).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
        assert!(apply_rope(&Tensor::zeros([3, 16]), &tables).is_err());
    }
}
