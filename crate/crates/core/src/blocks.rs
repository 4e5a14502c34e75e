//! Transformer building blocks: adaptive layer norm modulation, joint
//! multimodal attention, feed-forward, and the double- and single-stream
//! blocks.
//!
//! Every block exposes `forward` plus a `forward_cached` / `backward` pair.
//! Gradients accumulate into a second instance of the same block type (see
//! [`Parameters`]), so a model and its gradient buffer share one layout.

use crate::embeddings::{apply_rope, apply_rope_inverse, RopeTables};
use crate::error::{FluxError, Result};
use crate::nn::{join, Linear, Parameters};
use crate::numerics::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, silu,
    silu_backward, softmax_rows, softmax_rows_backward, LAYER_NORM_EPS,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Epsilon inside the per-head RMS of [`QkNorm`].
pub const QK_NORM_EPS: f64 = 1e-12;

/// Where text tokens sit in the joint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenOrder {
    #[default]
    TextFirst,
    ImageFirst,
}

impl TokenOrder {
    /// Row ranges of (text, image) inside the joint sequence.
    pub fn ranges(
        self,
        n_txt: usize,
        n_img: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        match self {
            TokenOrder::TextFirst => (0..n_txt, n_txt..n_txt + n_img),
            TokenOrder::ImageFirst => (n_img..n_img + n_txt, 0..n_img),
        }
    }

    pub fn concat(self, txt: &Tensor, img: &Tensor) -> Result<Tensor> {
        match self {
            TokenOrder::TextFirst => Tensor::concat_rows(txt, img),
            TokenOrder::ImageFirst => Tensor::concat_rows(img, txt),
        }
    }

    /// Splits a joint sequence into (text, image).
    pub fn split(self, joint: &Tensor, n_txt: usize, n_img: usize) -> (Tensor, Tensor) {
        let (t, i) = self.ranges(n_txt, n_img);
        (joint.slice_rows(t), joint.slice_rows(i))
    }

    pub fn join_ids(
        self,
        txt: &crate::embeddings::TokenIds,
        img: &crate::embeddings::TokenIds,
    ) -> crate::embeddings::TokenIds {
        match self {
            TokenOrder::TextFirst => txt.concat(img),
            TokenOrder::ImageFirst => img.concat(txt),
        }
    }
}

/// How block weights are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitScheme {
    /// Modulation projections and the output head start at zero, so every
    /// block starts as the identity.
    #[default]
    AdaLnZero,
    /// Every weight drawn from `±1/sqrt(fan_in)`; norm scales near 1.
    Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub qk_norm: bool,
    pub temb_activation: bool,
    pub order: TokenOrder,
    pub ln_eps: f64,
}

impl BlockConfig {
    pub fn new(d_model: usize, n_heads: usize, hidden: usize) -> Self {
        BlockConfig {
            d_model,
            n_heads,
            hidden,
            qk_norm: true,
            temb_activation: true,
            order: TokenOrder::TextFirst,
            ln_eps: LAYER_NORM_EPS,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(FluxError::Config(format!(
                "d_model {} not divisible into {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_head().is_multiple_of(2) {
            return Err(FluxError::Config(format!(
                "head dim {} must be even for rotary pairs",
                self.d_head()
            )));
        }
        if self.hidden == 0 {
            return Err(FluxError::Config("feed-forward width must be >= 1".into()));
        }
        if self.d_model < 2 {
            return Err(FluxError::Config("d_model must be >= 2".into()));
        }
        Ok(())
    }
}

/// Hidden width `round(d · ratio)`.
pub fn hidden_width(d: usize, ratio: f64) -> Result<usize> {
    let h = (d as f64 * ratio).round();
    if !(h >= 1.0) {
        return Err(FluxError::Config(format!(
            "hidden ratio {ratio} gives an empty feed-forward layer"
        )));
    }
    Ok(h as usize)
}

fn init_linear(d_in: usize, d_out: usize, zero: bool, rng: &mut Rng) -> Linear {
    if zero {
        Linear::zeros(d_in, d_out)
    } else {
        Linear::uniform(d_in, d_out, rng)
    }
}

fn check_state(op: &'static str, x: &Tensor, d: usize) -> Result<()> {
    if x.rank() != 2 || x.last_dim() != d {
        return Err(FluxError::shape(op, x.shape(), &[x.rows(), d]));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Modulation
// ---------------------------------------------------------------------------

/// Shift/scale/gate triple for one sub-layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub shift: Tensor,
    pub scale: Tensor,
    pub gate: Tensor,
}

impl Modulation {
    fn zeros(d: usize) -> Self {
        Modulation {
            shift: Tensor::zeros([d]),
            scale: Tensor::zeros([d]),
            gate: Tensor::zeros([d]),
        }
    }
}

/// Modulation parameters produced from the conditioning vector. `mlp` is
/// absent for single-stream blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnParams {
    pub msa: Modulation,
    pub mlp: Option<Modulation>,
}

impl AdaLnParams {
    /// Splits `[shift_msa, scale_msa, gate_msa(, shift_mlp, scale_mlp, gate_mlp)]`.
    fn from_flat(flat: &Tensor, d: usize) -> Result<Self> {
        let groups = flat.len() / d;
        let mut parts = flat.chunk(groups)?.into_iter();
        let mut next = || parts.next().expect("group count checked");
        let msa = Modulation {
            shift: next(),
            scale: next(),
            gate: next(),
        };
        let mlp = (groups == 6).then(|| Modulation {
            shift: next(),
            scale: next(),
            gate: next(),
        });
        Ok(AdaLnParams { msa, mlp })
    }

    fn zeros_like(&self) -> Self {
        let d = self.msa.shift.len();
        AdaLnParams {
            msa: Modulation::zeros(d),
            mlp: self.mlp.as_ref().map(|_| Modulation::zeros(d)),
        }
    }

    fn to_flat(&self) -> Tensor {
        let mut data = Vec::new();
        let mut push = |m: &Modulation| {
            data.extend_from_slice(m.shift.data());
            data.extend_from_slice(m.scale.data());
            data.extend_from_slice(m.gate.data());
        };
        push(&self.msa);
        if let Some(m) = &self.mlp {
            push(m);
        }
        Tensor::from_vec(data)
    }
}

/// Projects the conditioning vector to modulation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaLnLayer {
    pub proj: Linear,
    /// Apply SiLU to the conditioning vector before projecting.
    pub activation: bool,
    pub eps: f64,
}

impl AdaLnLayer {
    /// `groups` is 6 for double-stream blocks and 3 for single-stream ones.
    pub fn new(d: usize, groups: usize, cfg: &BlockConfig, init: InitScheme, rng: &mut Rng) -> Self {
        AdaLnLayer {
            proj: init_linear(d, groups * d, init == InitScheme::AdaLnZero, rng),
            activation: cfg.temb_activation,
            eps: cfg.ln_eps,
        }
    }

    fn d(&self) -> usize {
        self.proj.d_in()
    }

    fn condition(&self, temb: &Tensor) -> Tensor {
        if self.activation {
            silu(temb)
        } else {
            temb.clone()
        }
    }

    pub fn params(&self, temb: &Tensor) -> Result<AdaLnParams> {
        Ok(self.params_cached(temb)?.0)
    }

    fn params_cached(&self, temb: &Tensor) -> Result<(AdaLnParams, Tensor)> {
        if temb.len() != self.d() {
            return Err(FluxError::shape("adaln", temb.shape(), &[self.d()]));
        }
        let c = self.condition(temb);
        let flat = self.proj.forward(&c)?;
        Ok((AdaLnParams::from_flat(&flat, self.d())?, c))
    }

    /// Returns `dL/dtemb` and accumulates projection gradients.
    fn backward(
        &self,
        temb: &Tensor,
        c: &Tensor,
        d_params: &AdaLnParams,
        grad: &mut AdaLnLayer,
    ) -> Result<Tensor> {
        let dc = self.proj.backward(c, &d_params.to_flat(), &mut grad.proj)?;
        Ok(if self.activation {
            silu_backward(temb, &dc)
        } else {
            dc
        })
    }
}

impl Parameters for AdaLnLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `n · (1 + scale) + shift`, broadcast over rows.
pub fn modulate(n: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    n.mul_row(&scale.map(|s| 1.0 + s))?.add_row(shift)
}

/// Returns `(dn, dshift, dscale)`.
fn modulate_backward(n: &Tensor, scale: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dn = dy.mul_row(&scale.map(|s| 1.0 + s))?;
    Ok((dn, dy.sum_rows(), dy.mul(n)?.sum_rows()))
}

/// `x + h ⊙ gate`, with `gate` broadcast over rows.
fn gated_residual(x: &Tensor, h: &Tensor, gate: &Tensor) -> Result<Tensor> {
    x.add(&h.mul_row(gate)?)
}

/// Layer-normalizes `x` and applies the msa shift/scale.
pub fn adaln(x: &Tensor, temb: &Tensor, layer: &AdaLnLayer) -> Result<(Tensor, AdaLnParams)> {
    check_state("adaln", x, layer.d())?;
    let params = layer.params(temb)?;
    let n = layer_norm(x, layer.eps)?;
    let out = modulate(&n, &params.msa.shift, &params.msa.scale)?;
    Ok((out, params))
}

// ---------------------------------------------------------------------------
// Q/K normalization
// ---------------------------------------------------------------------------

/// Per-head RMS normalization of queries and keys with learned per-channel
/// scales shared across heads.
#[derive(Debug, Clone, PartialEq)]
pub struct QkNorm {
    pub query_scale: Tensor,
    pub key_scale: Tensor,
}

impl QkNorm {
    pub fn new(d_head: usize, init: InitScheme, rng: &mut Rng) -> Self {
        let mut scale = || match init {
            InitScheme::AdaLnZero => Tensor::full([d_head], 1.0),
            InitScheme::Dense => Tensor::from_fn([d_head], |_| rng.uniform_range(0.8, 1.2)),
        };
        QkNorm {
            query_scale: scale(),
            key_scale: scale(),
        }
    }

    pub fn d_head(&self) -> usize {
        self.query_scale.len()
    }
}

impl Parameters for QkNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&join(prefix, "query_scale"), &self.query_scale);
        f(&join(prefix, "key_scale"), &self.key_scale);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&join(prefix, "query_scale"), &mut self.query_scale);
        f(&join(prefix, "key_scale"), &mut self.key_scale);
    }
}

/// Divides every `d_head`-wide slice by its RMS and multiplies by `scale`.
/// Also returns the reciprocal RMS per slice for the backward pass.
fn rms_norm_heads(x: &Tensor, scale: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let dh = scale.len();
    if dh == 0 || !x.last_dim().is_multiple_of(dh) {
        return Err(FluxError::shape("qk_norm", x.shape(), scale.shape()));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.len() / dh);
    for head in out.data_mut().chunks_mut(dh) {
        let ms = head.iter().map(|v| v * v).sum::<f64>() / dh as f64;
        let r = 1.0 / (ms + QK_NORM_EPS).sqrt();
        inv.push(r);
        for (v, g) in head.iter_mut().zip(scale.data()) {
            *v *= r * g;
        }
    }
    Ok((out, inv))
}

fn rms_norm_heads_backward(
    x: &Tensor,
    scale: &Tensor,
    inv: &[f64],
    dy: &Tensor,
    dscale: &mut Tensor,
) -> Tensor {
    let dh = scale.len();
    let mut dx = dy.clone();
    for (s, (gx, xs)) in dx
        .data_mut()
        .chunks_mut(dh)
        .zip(x.data().chunks(dh))
        .enumerate()
    {
        let r = inv[s];
        // x̂ = x r ; y = x̂ g
        let mut dot = 0.0;
        for j in 0..dh {
            let xhat = xs[j] * r;
            dscale.data_mut()[j] += gx[j] * xhat;
            gx[j] *= scale.data()[j];
            dot += gx[j] * xhat;
        }
        let mean = dot / dh as f64;
        for j in 0..dh {
            gx[j] = r * (gx[j] - xs[j] * r * mean);
        }
    }
    dx
}

/// Normalizes `q` and `k` head by head.
pub fn qk_norm(q: &Tensor, k: &Tensor, norm: &QkNorm) -> Result<(Tensor, Tensor)> {
    Ok((
        rms_norm_heads(q, &norm.query_scale)?.0,
        rms_norm_heads(k, &norm.key_scale)?.0,
    ))
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

/// Saved activations of [`multi_head_attention`].
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q_rot: Tensor,
    pub k_rot: Tensor,
    pub v: Tensor,
    /// Softmax rows per head, `[n × n]` each.
    pub probs: Vec<Tensor>,
}

/// Rotary scaled dot-product attention over one sequence, heads laid out
/// as contiguous column blocks.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    rope: &RopeTables,
    n_heads: usize,
) -> Result<(Tensor, AttentionCache)> {
    q.expect_same_shape("attention", k)?;
    q.expect_same_shape("attention", v)?;
    let (n, d) = (q.rows(), q.last_dim());
    if n_heads == 0 || d % n_heads != 0 {
        return Err(FluxError::Config(format!(
            "width {d} not divisible into {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    if rope.len() != n || rope.head_dim() != dh {
        return Err(FluxError::shape("attention rope", rope.cos.shape(), &[n, dh]));
    }
    let q_rot = apply_rope(q, rope)?;
    let k_rot = apply_rope(k, rope)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros([n, d]);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q_rot.slice_cols(cols.clone());
        let kh = k_rot.slice_cols(cols.clone());
        let vh = v.slice_cols(cols);
        let p = softmax_rows(&matmul_nt(&qh, &kh)?.scale(scale));
        out.set_cols(h * dh, &matmul(&p, &vh)?);
        probs.push(p);
    }
    let cache = AttentionCache {
        q_rot,
        k_rot,
        v: v.clone(),
        probs,
    };
    Ok((out, cache))
}

/// Returns `(dq, dk, dv)` with respect to the un-rotated inputs.
pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    rope: &RopeTables,
    d_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, d) = (cache.v.rows(), cache.v.last_dim());
    let n_heads = cache.probs.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros([n, d]);
    let mut dk = Tensor::zeros([n, d]);
    let mut dv = Tensor::zeros([n, d]);
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = h * dh..(h + 1) * dh;
        let qh = cache.q_rot.slice_cols(cols.clone());
        let kh = cache.k_rot.slice_cols(cols.clone());
        let vh = cache.v.slice_cols(cols.clone());
        let doh = d_out.slice_cols(cols);
        dv.set_cols(h * dh, &matmul_tn(p, &doh)?);
        let dp = matmul_nt(&doh, &vh)?;
        let ds = softmax_rows_backward(p, &dp).scale(scale);
        dq.set_cols(h * dh, &matmul(&ds, &kh)?);
        dk.set_cols(h * dh, &matmul_tn(&ds, &qh)?);
    }
    Ok((
        apply_rope_inverse(&dq, rope)?,
        apply_rope_inverse(&dk, rope)?,
        dv,
    ))
}

/// Attention over the concatenation of text and image tokens.
///
/// `rope` covers the joint sequence in `order`. Returns the per-modality
/// attention outputs, before any output projection, as `(img, txt)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_attention(
    img_q: &Tensor,
    img_k: &Tensor,
    img_v: &Tensor,
    txt_q: &Tensor,
    txt_k: &Tensor,
    txt_v: &Tensor,
    rope: &RopeTables,
    n_heads: usize,
    order: TokenOrder,
) -> Result<(Tensor, Tensor)> {
    let (n_img, n_txt) = (img_q.rows(), txt_q.rows());
    if rope.len() != n_img + n_txt {
        return Err(FluxError::shape(
            "joint_attention rope",
            rope.cos.shape(),
            &[n_img + n_txt, rope.head_dim()],
        ));
    }
    let q = order.concat(txt_q, img_q)?;
    let k = order.concat(txt_k, img_k)?;
    let v = order.concat(txt_v, img_v)?;
    let (out, _) = multi_head_attention(&q, &k, &v, rope, n_heads)?;
    let (txt, img) = order.split(&out, n_txt, n_img);
    Ok((img, txt))
}

// ---------------------------------------------------------------------------
// Feed-forward
// ---------------------------------------------------------------------------

/// `linear(d → hidden) → gelu → linear(hidden → d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
struct FeedForwardCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl FeedForward {
    pub fn new(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            fc1: Linear::uniform(d, hidden, rng),
            fc2: Linear::uniform(hidden, d, rng),
        }
    }

    /// Builds a layer of width `round(d · hidden_ratio)`.
    pub fn with_ratio(d: usize, hidden_ratio: f64, rng: &mut Rng) -> Result<Self> {
        Ok(Self::new(d, hidden_width(d, hidden_ratio)?, rng))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, FeedForwardCache)> {
        let pre = self.fc1.forward(x)?;
        let act = gelu(&pre);
        let out = self.fc2.forward(&act)?;
        Ok((
            out,
            FeedForwardCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    fn backward(&self, cache: &FeedForwardCache, dy: &Tensor, grad: &mut FeedForward) -> Result<Tensor> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2)?;
        let dpre = gelu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)
    }
}

impl Parameters for FeedForward {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

// ---------------------------------------------------------------------------
// Shared Q/K/V projection
// ---------------------------------------------------------------------------

/// Query/key/value projections with optional Q/K normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvProjection {
    pub to_q: Linear,
    pub to_k: Linear,
    pub to_v: Linear,
    pub norm: Option<QkNorm>,
}

#[derive(Debug, Clone)]
struct QkvCache {
    h: Tensor,
    q: Tensor,
    k: Tensor,
    inv_q: Vec<f64>,
    inv_k: Vec<f64>,
}

impl QkvProjection {
    fn new(cfg: &BlockConfig, init: InitScheme, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        QkvProjection {
            to_q: Linear::uniform(d, d, rng),
            to_k: Linear::uniform(d, d, rng),
            to_v: Linear::uniform(d, d, rng),
            norm: cfg.qk_norm.then(|| QkNorm::new(cfg.d_head(), init, rng)),
        }
    }

    /// Returns `(q, k, v)` after normalization.
    pub fn project(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (q, k, v, _) = self.forward_cached(h)?;
        Ok((q, k, v))
    }

    fn forward_cached(&self, h: &Tensor) -> Result<(Tensor, Tensor, Tensor, QkvCache)> {
        let q = self.to_q.forward(h)?;
        let k = self.to_k.forward(h)?;
        let v = self.to_v.forward(h)?;
        let (qn, kn, inv_q, inv_k) = match &self.norm {
            Some(norm) => {
                let (qn, iq) = rms_norm_heads(&q, &norm.query_scale)?;
                let (kn, ik) = rms_norm_heads(&k, &norm.key_scale)?;
                (qn, kn, iq, ik)
            }
            None => (q.clone(), k.clone(), Vec::new(), Vec::new()),
        };
        let cache = QkvCache {
            h: h.clone(),
            q,
            k,
            inv_q,
            inv_k,
        };
        Ok((qn, kn, v, cache))
    }

    fn backward(
        &self,
        cache: &QkvCache,
        dq: &Tensor,
        dk: &Tensor,
        dv: &Tensor,
        grad: &mut QkvProjection,
    ) -> Result<Tensor> {
        let (dq, dk) = match (&self.norm, &mut grad.norm) {
            (Some(norm), Some(gnorm)) => (
                rms_norm_heads_backward(&cache.q, &norm.query_scale, &cache.inv_q, dq, &mut gnorm.query_scale),
                rms_norm_heads_backward(&cache.k, &norm.key_scale, &cache.inv_k, dk, &mut gnorm.key_scale),
            ),
            _ => (dq.clone(), dk.clone()),
        };
        let mut dh = self.to_q.backward(&cache.h, &dq, &mut grad.to_q)?;
        dh.add_assign(&self.to_k.backward(&cache.h, &dk, &mut grad.to_k)?)?;
        dh.add_assign(&self.to_v.backward(&cache.h, dv, &mut grad.to_v)?)?;
        Ok(dh)
    }
}

impl Parameters for QkvProjection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.to_q.visit(&join(prefix, "to_q"), f);
        self.to_k.visit(&join(prefix, "to_k"), f);
        self.to_v.visit(&join(prefix, "to_v"), f);
        if let Some(n) = &self.norm {
            n.visit(&join(prefix, "qk_norm"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.to_q.visit_mut(&join(prefix, "to_q"), f);
        self.to_k.visit_mut(&join(prefix, "to_k"), f);
        self.to_v.visit_mut(&join(prefix, "to_v"), f);
        if let Some(n) = &mut self.norm {
            n.visit_mut(&join(prefix, "qk_norm"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Double-stream block
// ---------------------------------------------------------------------------

/// Image tokens (`hidden_states`) and text tokens (`encoder_hidden_states`).
#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub hidden_states: Tensor,
    pub encoder_hidden_states: Tensor,
}

impl StreamState {
    pub fn new(hidden_states: Tensor, encoder_hidden_states: Tensor) -> Self {
        StreamState {
            hidden_states,
            encoder_hidden_states,
        }
    }

    pub fn n_img(&self) -> usize {
        self.hidden_states.rows()
    }

    pub fn n_txt(&self) -> usize {
        self.encoder_hidden_states.rows()
    }
}

/// One modality's weights inside a double-stream block.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamWeights {
    pub modulation: AdaLnLayer,
    pub qkv: QkvProjection,
    pub to_out: Linear,
    pub ff: FeedForward,
}

impl StreamWeights {
    fn new(cfg: &BlockConfig, init: InitScheme, rng: &mut Rng) -> Self {
        let d = cfg.d_model;
        StreamWeights {
            modulation: AdaLnLayer::new(d, 6, cfg, init, rng),
            qkv: QkvProjection::new(cfg, init, rng),
            to_out: Linear::uniform(d, d, rng),
            ff: FeedForward::new(d, cfg.hidden, rng),
        }
    }
}

impl Parameters for StreamWeights {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.modulation.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "attn"), f);
        self.to_out.visit(&join(prefix, "attn.to_out"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.modulation.visit_mut(&join(prefix, "norm1"), f);
        self.qkv.visit_mut(&join(prefix, "attn"), f);
        self.to_out.visit_mut(&join(prefix, "attn.to_out"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

#[derive(Debug, Clone)]
struct StreamCache {
    x: Tensor,
    c: Tensor,
    params: AdaLnParams,
    n1: Tensor,
    qkv: QkvCache,
    attn: Tensor,
    proj: Tensor,
    x1: Tensor,
    n2: Tensor,
    ff: FeedForwardCache,
    ff_out: Tensor,
}

struct StreamPre {
    q: Tensor,
    k: Tensor,
    v: Tensor,
    c: Tensor,
    params: AdaLnParams,
    n1: Tensor,
    qkv: QkvCache,
}

impl StreamWeights {
    fn pre(&self, x: &Tensor, temb: &Tensor) -> Result<StreamPre> {
        let (params, c) = self.modulation.params_cached(temb)?;
        let n1 = layer_norm(x, self.modulation.eps)?;
        let h = modulate(&n1, &params.msa.shift, &params.msa.scale)?;
        let (q, k, v, qkv) = self.qkv.forward_cached(&h)?;
        Ok(StreamPre {
            q,
            k,
            v,
            c,
            params,
            n1,
            qkv,
        })
    }

    fn post(&self, x: &Tensor, pre: StreamPre, attn: Tensor) -> Result<(Tensor, StreamCache)> {
        let mlp = pre.params.mlp.as_ref().expect("double-stream modulation has mlp terms");
        let proj = self.to_out.forward(&attn)?;
        let x1 = gated_residual(x, &proj, &pre.params.msa.gate)?;
        let n2 = layer_norm(&x1, self.modulation.eps)?;
        let m = modulate(&n2, &mlp.shift, &mlp.scale)?;
        let (ff_out, ff) = self.ff.forward_cached(&m)?;
        let out = gated_residual(&x1, &ff_out, &mlp.gate)?;
        let cache = StreamCache {
            x: x.clone(),
            c: pre.c,
            params: pre.params,
            n1: pre.n1,
            qkv: pre.qkv,
            attn,
            proj,
            x1,
            n2,
            ff,
            ff_out,
        };
        Ok((out, cache))
    }

    /// Backward through the post-attention half. Returns `(dx, d_attn)`;
    /// modulation gradients land in `dp`.
    fn post_backward(
        &self,
        cache: &StreamCache,
        d_out: &Tensor,
        dp: &mut AdaLnParams,
        grad: &mut StreamWeights,
    ) -> Result<(Tensor, Tensor)> {
        let mlp = cache.params.mlp.as_ref().expect("mlp modulation");
        let dmlp = dp.mlp.as_mut().expect("mlp modulation");
        dmlp.gate = d_out.mul(&cache.ff_out)?.sum_rows();
        let d_ff = d_out.mul_row(&mlp.gate)?;
        let dm = self.ff.backward(&cache.ff, &d_ff, &mut grad.ff)?;
        let (dn2, dshift, dscale) = modulate_backward(&cache.n2, &mlp.scale, &dm)?;
        dmlp.shift = dshift;
        dmlp.scale = dscale;
        let mut dx1 = d_out.clone();
        dx1.add_assign(&layer_norm_backward(&cache.x1, &cache.n2, &dn2, self.modulation.eps))?;

        dp.msa.gate = dx1.mul(&cache.proj)?.sum_rows();
        let dproj = dx1.mul_row(&cache.params.msa.gate)?;
        let d_attn = self.to_out.backward(&cache.attn, &dproj, &mut grad.to_out)?;
        Ok((dx1, d_attn))
    }

    /// Backward through the pre-attention half, accumulating into `dx`.
    /// Returns `dL/dtemb`.
    #[allow(clippy::too_many_arguments)]
    fn pre_backward(
        &self,
        cache: &StreamCache,
        temb: &Tensor,
        dq: &Tensor,
        dk: &Tensor,
        dv: &Tensor,
        mut dp: AdaLnParams,
        dx: &mut Tensor,
        grad: &mut StreamWeights,
    ) -> Result<Tensor> {
        let dh = self.qkv.backward(&cache.qkv, dq, dk, dv, &mut grad.qkv)?;
        let (dn1, dshift, dscale) = modulate_backward(&cache.n1, &cache.params.msa.scale, &dh)?;
        dp.msa.shift = dshift;
        dp.msa.scale = dscale;
        dx.add_assign(&layer_norm_backward(&cache.x, &cache.n1, &dn1, self.modulation.eps))?;
        self.modulation
            .backward(temb, &cache.c, &dp, &mut grad.modulation)
    }
}

/// Separate image and text weights; attention runs over the joint sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleStreamBlock {
    pub cfg: BlockConfig,
    pub img: StreamWeights,
    pub txt: StreamWeights,
}

#[derive(Debug, Clone)]
pub struct DoubleStreamCache {
    img: StreamCache,
    txt: StreamCache,
    attn: AttentionCache,
    temb: Tensor,
}

impl DoubleStreamCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl DoubleStreamBlock {
    pub fn new(cfg: &BlockConfig, init: InitScheme, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(DoubleStreamBlock {
            cfg: cfg.clone(),
            img: StreamWeights::new(cfg, init, rng),
            txt: StreamWeights::new(cfg, init, rng),
        })
    }

    fn check(&self, state: &StreamState, rope: &RopeTables) -> Result<()> {
        check_state("double_stream_block", &state.hidden_states, self.cfg.d_model)?;
        check_state("double_stream_block", &state.encoder_hidden_states, self.cfg.d_model)?;
        if rope.len() != state.n_img() + state.n_txt() {
            return Err(FluxError::shape(
                "double_stream_block rope",
                rope.cos.shape(),
                &[state.n_img() + state.n_txt(), self.cfg.d_head()],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, state: &StreamState, temb: &Tensor, rope: &RopeTables) -> Result<StreamState> {
        Ok(self.forward_cached(state, temb, rope)?.0)
    }

    /// The joint attention outputs `(img, txt)` before output projections.
    pub fn attention_output(
        &self,
        state: &StreamState,
        temb: &Tensor,
        rope: &RopeTables,
    ) -> Result<(Tensor, Tensor)> {
        self.check(state, rope)?;
        let img = self.img.pre(&state.hidden_states, temb)?;
        let txt = self.txt.pre(&state.encoder_hidden_states, temb)?;
        joint_attention(
            &img.q, &img.k, &img.v, &txt.q, &txt.k, &txt.v, rope, self.cfg.n_heads, self.cfg.order,
        )
    }

    pub fn forward_cached(
        &self,
        state: &StreamState,
        temb: &Tensor,
        rope: &RopeTables,
    ) -> Result<(StreamState, DoubleStreamCache)> {
        self.check(state, rope)?;
        let order = self.cfg.order;
        let (n_img, n_txt) = (state.n_img(), state.n_txt());
        let img = self.img.pre(&state.hidden_states, temb)?;
        let txt = self.txt.pre(&state.encoder_hidden_states, temb)?;
        let q = order.concat(&txt.q, &img.q)?;
        let k = order.concat(&txt.k, &img.k)?;
        let v = order.concat(&txt.v, &img.v)?;
        let (joint, attn) = multi_head_attention(&q, &k, &v, rope, self.cfg.n_heads)?;
        let (txt_attn, img_attn) = order.split(&joint, n_txt, n_img);
        let (img_out, img_cache) = self.img.post(&state.hidden_states, img, img_attn)?;
        let (txt_out, txt_cache) = self.txt.post(&state.encoder_hidden_states, txt, txt_attn)?;
        let cache = DoubleStreamCache {
            img: img_cache,
            txt: txt_cache,
            attn,
            temb: temb.clone(),
        };
        Ok((StreamState::new(img_out, txt_out), cache))
    }

    /// Returns `(d_state, d_temb)`; parameter gradients accumulate in `grad`.
    pub fn backward(
        &self,
        cache: &DoubleStreamCache,
        d_out: &StreamState,
        grad: &mut DoubleStreamBlock,
        rope: &RopeTables,
    ) -> Result<(StreamState, Tensor)> {
        let order = self.cfg.order;
        let (n_img, n_txt) = (d_out.n_img(), d_out.n_txt());
        let mut dp_img = cache.img.params.zeros_like();
        let mut dp_txt = cache.txt.params.zeros_like();
        let (mut dx_img, d_attn_img) =
            self.img
                .post_backward(&cache.img, &d_out.hidden_states, &mut dp_img, &mut grad.img)?;
        let (mut dx_txt, d_attn_txt) = self.txt.post_backward(
            &cache.txt,
            &d_out.encoder_hidden_states,
            &mut dp_txt,
            &mut grad.txt,
        )?;
        let d_joint = order.concat(&d_attn_txt, &d_attn_img)?;
        let (dq, dk, dv) = multi_head_attention_backward(&cache.attn, rope, &d_joint)?;
        let (dq_txt, dq_img) = order.split(&dq, n_txt, n_img);
        let (dk_txt, dk_img) = order.split(&dk, n_txt, n_img);
        let (dv_txt, dv_img) = order.split(&dv, n_txt, n_img);
        let mut d_temb = self.img.pre_backward(
            &cache.img, &cache.temb, &dq_img, &dk_img, &dv_img, dp_img, &mut dx_img, &mut grad.img,
        )?;
        d_temb.add_assign(&self.txt.pre_backward(
            &cache.txt, &cache.temb, &dq_txt, &dk_txt, &dv_txt, dp_txt, &mut dx_txt, &mut grad.txt,
        )?)?;
        Ok((StreamState::new(dx_img, dx_txt), d_temb))
    }
}

impl Parameters for DoubleStreamBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.img.visit(&join(prefix, "img"), f);
        self.txt.visit(&join(prefix, "txt"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.img.visit_mut(&join(prefix, "img"), f);
        self.txt.visit_mut(&join(prefix, "txt"), f);
    }
}

// ---------------------------------------------------------------------------
// Single-stream block
// ---------------------------------------------------------------------------

/// Shared weights over the joint sequence; attention and MLP branches run
/// in parallel from the same modulated input and merge through one fused
/// projection of width `d + hidden → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct SingleStreamBlock {
    pub cfg: BlockConfig,
    pub modulation: AdaLnLayer,
    pub qkv: QkvProjection,
    pub mlp_in: Linear,
    pub to_out: Linear,
}

#[derive(Debug, Clone)]
pub struct SingleStreamCache {
    x: Tensor,
    temb: Tensor,
    c: Tensor,
    params: AdaLnParams,
    n: Tensor,
    h: Tensor,
    qkv: QkvCache,
    attn: AttentionCache,
    mlp_pre: Tensor,
    merged: Tensor,
    proj: Tensor,
}

impl SingleStreamCache {
    pub fn attention(&self) -> &AttentionCache {
        &self.attn
    }
}

impl SingleStreamBlock {
    pub fn new(cfg: &BlockConfig, init: InitScheme, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        Ok(SingleStreamBlock {
            cfg: cfg.clone(),
            modulation: AdaLnLayer::new(d, 3, cfg, init, rng),
            qkv: QkvProjection::new(cfg, init, rng),
            mlp_in: Linear::uniform(d, cfg.hidden, rng),
            to_out: Linear::uniform(d + cfg.hidden, d, rng),
        })
    }

    fn check(&self, x: &Tensor, rope: &RopeTables) -> Result<()> {
        check_state("single_stream_block", x, self.cfg.d_model)?;
        if rope.len() != x.rows() {
            return Err(FluxError::shape(
                "single_stream_block rope",
                rope.cos.shape(),
                &[x.rows(), self.cfg.d_head()],
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, temb: &Tensor, rope: &RopeTables) -> Result<Tensor> {
        Ok(self.forward_cached(x, temb, rope)?.0)
    }

    /// The attention branch output before the fused projection.
    pub fn attention_output(&self, x: &Tensor, temb: &Tensor, rope: &RopeTables) -> Result<Tensor> {
        Ok(self.forward_cached(x, temb, rope)?.1.merged.slice_cols(0..self.cfg.d_model))
    }

    pub fn forward_cached(
        &self,
        x: &Tensor,
        temb: &Tensor,
        rope: &RopeTables,
    ) -> Result<(Tensor, SingleStreamCache)> {
        self.check(x, rope)?;
        let (params, c) = self.modulation.params_cached(temb)?;
        let n = layer_norm(x, self.modulation.eps)?;
        let h = modulate(&n, &params.msa.shift, &params.msa.scale)?;
        let (q, k, v, qkv) = self.qkv.forward_cached(&h)?;
        let (attn_out, attn) = multi_head_attention(&q, &k, &v, rope, self.cfg.n_heads)?;
        let mlp_pre = self.mlp_in.forward(&h)?;
        let merged = Tensor::concat_cols(&attn_out, &gelu(&mlp_pre))?;
        let proj = self.to_out.forward(&merged)?;
        let out = gated_residual(x, &proj, &params.msa.gate)?;
        let cache = SingleStreamCache {
            x: x.clone(),
            temb: temb.clone(),
            c,
            params,
            n,
            h,
            qkv,
            attn,
            mlp_pre,
            merged,
            proj,
        };
        Ok((out, cache))
    }

    /// Returns `(dx, d_temb)`.
    pub fn backward(
        &self,
        cache: &SingleStreamCache,
        d_out: &Tensor,
        grad: &mut SingleStreamBlock,
        rope: &RopeTables,
    ) -> Result<(Tensor, Tensor)> {
        let d = self.cfg.d_model;
        let mut dp = cache.params.zeros_like();
        dp.msa.gate = d_out.mul(&cache.proj)?.sum_rows();
        let dproj = d_out.mul_row(&cache.params.msa.gate)?;
        let dmerged = self.to_out.backward(&cache.merged, &dproj, &mut grad.to_out)?;
        let d_attn = dmerged.slice_cols(0..d);
        let d_act = dmerged.slice_cols(d..d + self.cfg.hidden);
        let d_mlp_pre = gelu_backward(&cache.mlp_pre, &d_act);
        let mut dh = self.mlp_in.backward(&cache.h, &d_mlp_pre, &mut grad.mlp_in)?;
        let (dq, dk, dv) = multi_head_attention_backward(&cache.attn, rope, &d_attn)?;
        dh.add_assign(&self.qkv.backward(&cache.qkv, &dq, &dk, &dv, &mut grad.qkv)?)?;
        let (dn, dshift, dscale) = modulate_backward(&cache.n, &cache.params.msa.scale, &dh)?;
        dp.msa.shift = dshift;
        dp.msa.scale = dscale;
        let mut dx = d_out.clone();
        dx.add_assign(&layer_norm_backward(&cache.x, &cache.n, &dn, self.modulation.eps))?;
        let d_temb = self
            .modulation
            .backward(&cache.temb, &cache.c, &dp, &mut grad.modulation)?;
        Ok((dx, d_temb))
    }
}

impl Parameters for SingleStreamBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.modulation.visit(&join(prefix, "norm"), f);
        self.qkv.visit(&join(prefix, "attn"), f);
        self.mlp_in.visit(&join(prefix, "mlp_in"), f);
        self.to_out.visit(&join(prefix, "proj_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.modulation.visit_mut(&join(prefix, "norm"), f);
        self.qkv.visit_mut(&join(prefix, "attn"), f);
        self.mlp_in.visit_mut(&join(prefix, "mlp_in"), f);
        self.to_out.visit_mut(&join(prefix, "proj_out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{build_img_ids, build_rope_tables, build_text_ids, RopeConfig};
    use crate::numerics::randn;

    fn cfg() -> BlockConfig {
        BlockConfig::new(32, 2, 64)
    }

    fn rope_for(n_txt: usize, h: usize, w: usize) -> RopeTables {
        rope_with(n_txt, h, w, [4, 6, 6])
    }

    fn rope_with(n_txt: usize, h: usize, w: usize, axes: [usize; 3]) -> RopeTables {
        let ids = TokenOrder::TextFirst.join_ids(&build_text_ids(n_txt), &build_img_ids(h, w).unwrap());
        build_rope_tables(&ids, &RopeConfig::new(axes, 10_000.0)).unwrap()
    }

    #[test]
    fn zero_adaln_layer_gives_plain_layer_norm() {
        let mut rng = Rng::new(1);
        let layer = AdaLnLayer::new(32, 6, &cfg(), InitScheme::AdaLnZero, &mut rng);
        let x = randn(&mut rng, [3, 32]);
        let temb = randn(&mut rng, [32]);
        let (out, params) = adaln(&x, &temb, &layer).unwrap();
        assert!(params.to_flat().data().iter().all(|&v| v == 0.0));
        assert_eq!(out, layer_norm(&x, LAYER_NORM_EPS).unwrap());
    }

    #[test]
    fn adaln_shift_only() {
        let mut rng = Rng::new(2);
        let mut layer = AdaLnLayer::new(4, 3, &cfg(), InitScheme::AdaLnZero, &mut rng);
        layer.proj.bias.data_mut()[..4].copy_from_slice(&[0.5; 4]);
        let x = randn(&mut rng, [2, 4]);
        let (out, _) = adaln(&x, &Tensor::zeros([4]), &layer).unwrap();
        let expect = layer_norm(&x, LAYER_NORM_EPS).unwrap().map(|v| v + 0.5);
        assert!(out.max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn adaln_split_order_matches_manual_projection() {
        let mut rng = Rng::new(3);
        let mut c = cfg();
        c.temb_activation = false;
        let layer = AdaLnLayer::new(32, 6, &c, InitScheme::Dense, &mut rng);
        let temb = randn(&mut rng, [32]);
        let params = layer.params(&temb).unwrap();
        let mut manual = vec![0.0; 6 * 32];
        for (j, m) in manual.iter_mut().enumerate() {
            *m = layer.proj.bias.data()[j];
            for i in 0..32 {
                *m += temb.data()[i] * layer.proj.weight.get2(i, j);
            }
        }
        let groups = [
            &params.msa.shift,
            &params.msa.scale,
            &params.msa.gate,
            &params.mlp.as_ref().unwrap().shift,
            &params.mlp.as_ref().unwrap().scale,
            &params.mlp.as_ref().unwrap().gate,
        ];
        for (g, t) in groups.iter().enumerate() {
            for i in 0..32 {
                assert!((t.data()[i] - manual[g * 32 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_stream_modulation_has_no_mlp_terms() {
        let mut rng = Rng::new(4);
        let layer = AdaLnLayer::new(8, 3, &cfg(), InitScheme::Dense, &mut rng);
        assert!(layer.params(&Tensor::zeros([8])).unwrap().mlp.is_none());
    }

    #[test]
    fn qk_norm_examples() {
        let mut rng = Rng::new(5);
        let norm = QkNorm::new(4, InitScheme::AdaLnZero, &mut rng);
        let unit = Tensor::from_rows(&[[1.0, -1.0, 1.0, -1.0, 2.0, 0.0, 0.0, 0.0]]);
        let (q, _) = qk_norm(&unit, &unit, &norm).unwrap();
        // second head has RMS 1 as well
        assert!(q.max_abs_diff(&unit).unwrap() < 1e-10);

        let x = randn(&mut rng, [3, 8]);
        let (a, _) = qk_norm(&x, &x, &norm).unwrap();
        let (b, _) = qk_norm(&x.scale(10.0), &x, &norm).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-8);
        for head in a.data().chunks(4) {
            let rms = (head.iter().map(|v| v * v).sum::<f64>() / 4.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn single_token_attention_returns_its_value() {
        let rope = rope_for(0, 1, 1);
        let mut rng = Rng::new(6);
        let q = randn(&mut rng, [1, 16]);
        let k = randn(&mut rng, [1, 16]);
        let v = randn(&mut rng, [1, 16]);
        let e = Tensor::zeros([0, 16]);
        let (img, txt) = joint_attention(&q, &k, &v, &e, &e, &e, &rope, 1, TokenOrder::TextFirst).unwrap();
        assert_eq!(img, v);
        assert_eq!(txt.rows(), 0);
    }

    #[test]
    fn extreme_logits_select_the_matching_key() {
        let rope = RopeTables {
            cos: Tensor::full([2, 2], 1.0),
            sin: Tensor::zeros([2, 2]),
        };
        let q = Tensor::from_rows(&[[50.0, 0.0], [0.0, 50.0]]);
        let k = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let v = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let (out, _) = multi_head_attention(&q, &k, &v, &rope, 1).unwrap();
        assert!(out.max_abs_diff(&v).unwrap() < 1e-6);
    }

    #[test]
    fn feed_forward_examples() {
        let mut rng = Rng::new(7);
        let mut ff = FeedForward::with_ratio(4, 4.0, &mut rng).unwrap();
        assert_eq!(ff.fc1.d_out(), 16);
        let x = randn(&mut rng, [3, 4]);
        assert_eq!(ff.forward(&x).unwrap().shape(), &[3, 4]);
        ff.zero_all();
        assert!(ff.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));

        let unit = FeedForward {
            fc1: Linear {
                weight: Tensor::full([1, 1], 1.0),
                bias: Tensor::zeros([1]),
            },
            fc2: Linear {
                weight: Tensor::full([1, 1], 1.0),
                bias: Tensor::zeros([1]),
            },
        };
        for &v in &[-2.0, -0.3, 0.0, 0.8, 3.0] {
            let out = unit.forward(&Tensor::from_rows(&[[v]])).unwrap();
            assert_eq!(out.data()[0], crate::numerics::gelu_scalar(v));
        }
        assert!(FeedForward::with_ratio(4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let mut rng = Rng::new(8);
        let c = cfg();
        let rope = rope_for(2, 2, 2);
        let state = StreamState::new(randn(&mut rng, [4, 32]), randn(&mut rng, [2, 32]));
        let temb = randn(&mut rng, [32]);
        let double = DoubleStreamBlock::new(&c, InitScheme::AdaLnZero, &mut rng).unwrap();
        assert_eq!(double.forward(&state, &temb, &rope).unwrap(), state);
        let single = SingleStreamBlock::new(&c, InitScheme::AdaLnZero, &mut rng).unwrap();
        let x = Tensor::concat_rows(&state.encoder_hidden_states, &state.hidden_states).unwrap();
        assert_eq!(single.forward(&x, &temb, &rope).unwrap(), x);
    }

    #[test]
    fn block_shapes_are_preserved() {
        let mut rng = Rng::new(9);
        let c = cfg();
        let rope = rope_for(2, 2, 2);
        let state = StreamState::new(randn(&mut rng, [4, 32]), randn(&mut rng, [2, 32]));
        let temb = randn(&mut rng, [32]);
        let double = DoubleStreamBlock::new(&c, InitScheme::Dense, &mut rng).unwrap();
        let out = double.forward(&state, &temb, &rope).unwrap();
        assert_eq!(out.hidden_states.shape(), &[4, 32]);
        assert_eq!(out.encoder_hidden_states.shape(), &[2, 32]);
        let bad = rope_for(3, 2, 2);
        assert!(double.forward(&state, &temb, &bad).is_err());
    }

    #[test]
    fn single_stream_is_pure() {
        let mut rng = Rng::new(10);
        let rope = rope_for(2, 2, 2);
        let block = SingleStreamBlock::new(&cfg(), InitScheme::Dense, &mut rng).unwrap();
        let x = randn(&mut rng, [6, 32]);
        let temb = randn(&mut rng, [32]);
        let a = block.forward(&x, &temb, &rope).unwrap();
        let b = block.forward(&x, &temb, &rope).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    fn flat_grad_check<P: Parameters + Clone>(
        model: &P,
        grad: &P,
        loss: impl Fn(&P) -> f64,
    ) -> f64 {
        let theta = Tensor::from_vec(model.flatten());
        let analytic = Tensor::from_vec(grad.flatten());
        let mut probe = model.clone();
        let coords: Vec<usize> = (0..theta.len()).step_by(7).collect();
        crate::numerics::grad_check_at(
            |t| {
                probe.load_flat(t.data());
                Ok(loss(&probe))
            },
            &theta,
            &analytic,
            1e-5,
            &coords,
        )
        .unwrap()
    }

    #[test]
    fn double_stream_backward_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut c = BlockConfig::new(16, 2, 32);
        c.ln_eps = 1e-6;
        let rope = rope_with(2, 2, 2, [2, 2, 4]);
        let block = DoubleStreamBlock::new(&c, InitScheme::Dense, &mut rng).unwrap();
        let state = StreamState::new(randn(&mut rng, [4, 16]), randn(&mut rng, [2, 16]));
        let temb = randn(&mut rng, [16]);
        let up = StreamState::new(randn(&mut rng, [4, 16]), randn(&mut rng, [2, 16]));
        let loss = |b: &DoubleStreamBlock, s: &StreamState, t: &Tensor| {
            let o = b.forward(s, t, &rope).unwrap();
            o.hidden_states.dot(&up.hidden_states).unwrap()
                + o.encoder_hidden_states.dot(&up.encoder_hidden_states).unwrap()
        };
        let (_, cache) = block.forward_cached(&state, &temb, &rope).unwrap();
        let mut grad = block.clone();
        grad.zero_all();
        let (dstate, dtemb) = block.backward(&cache, &up, &mut grad, &rope).unwrap();

        assert!(flat_grad_check(&block, &grad, |b| loss(b, &state, &temb)) < 1e-5);
        let e = crate::numerics::grad_check(
            |t| Ok(loss(&block, &state, t)),
            &temb,
            &dtemb,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "temb {e}");
        let e = crate::numerics::grad_check(
            |h| Ok(loss(&block, &StreamState::new(h.clone(), state.encoder_hidden_states.clone()), &temb)),
            &state.hidden_states,
            &dstate.hidden_states,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "img {e}");
        let e = crate::numerics::grad_check(
            |h| Ok(loss(&block, &StreamState::new(state.hidden_states.clone(), h.clone()), &temb)),
            &state.encoder_hidden_states,
            &dstate.encoder_hidden_states,
            1e-5,
        )
        .unwrap();
        assert!(e < 1e-5, "txt {e}");
    }

    #[test]
    fn single_stream_backward_matches_finite_differences() {
        let mut rng = Rng::new(12);
        let c = BlockConfig::new(16, 2, 32);
        let rope = rope_with(2, 2, 2, [2, 2, 4]);
        let block = SingleStreamBlock::new(&c, InitScheme::Dense, &mut rng).unwrap();
        let x = randn(&mut rng, [6, 16]);
        let temb = randn(&mut rng, [16]);
        let up = randn(&mut rng, [6, 16]);
        let loss = |b: &SingleStreamBlock, x: &Tensor, t: &Tensor| {
            b.forward(x, t, &rope).unwrap().dot(&up).unwrap()
        };
        let (_, cache) = block.forward_cached(&x, &temb, &rope).unwrap();
        let mut grad = block.clone();
        grad.zero_all();
        let (dx, dtemb) = block.backward(&cache, &up, &mut grad, &rope).unwrap();
        assert!(flat_grad_check(&block, &grad, |b| loss(b, &x, &temb)) < 1e-5);
        let e = crate::numerics::grad_check(|t| Ok(loss(&block, &x, t)), &temb, &dtemb, 1e-5).unwrap();
        assert!(e < 1e-5, "temb {e}");
        let e = crate::numerics::grad_check(|t| Ok(loss(&block, t, &temb)), &x, &dx, 1e-5).unwrap();
        assert!(e < 1e-5, "x {e}");
    }
}
