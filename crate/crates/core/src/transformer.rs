//! The velocity predictor: input projections, conditioning embedding,
//! double-stream stack, single-stream stack and output head.

use std::path::Path;

use crate::blocks::{
    hidden_width, modulate, BlockConfig, DoubleStreamBlock, DoubleStreamCache, InitScheme,
    SingleStreamBlock, SingleStreamCache, StreamState, TokenOrder,
};
use crate::embeddings::{
    build_rope_tables, sinusoidal_embed, RopeConfig, RopeTables, TokenIds, MAX_PERIOD,
    TIMESTEP_SCALE,
};
use crate::error::{FluxError, Result};
use crate::nn::{join, Linear, Parameters};
use crate::numerics::{layer_norm, layer_norm_backward, silu, silu_backward, LAYER_NORM_EPS};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::weights;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub latent_channels: usize,
    pub patch: usize,
    pub text_token_dim: usize,
    pub pooled_dim: usize,
    /// Width of the sinusoidal timestep/guidance embeddings.
    pub scalar_embed_dim: usize,
    pub rope: RopeConfig,
    pub hidden_ratio: f64,
    pub qk_norm: bool,
    pub temb_activation: bool,
    pub order: TokenOrder,
    /// Text sequence length the pipeline feeds in.
    pub n_txt: usize,
}

impl ModelConfig {
    /// Desk-scale preset used by the CLI sampler.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            n_double: 2,
            n_single: 2,
            latent_channels: 16,
            patch: 2,
            text_token_dim: 32,
            pooled_dim: 32,
            scalar_embed_dim: 32,
            rope: RopeConfig::new([4, 6, 6], 10_000.0),
            hidden_ratio: 4.0,
            qk_norm: true,
            temb_activation: true,
            order: TokenOrder::TextFirst,
            n_txt: 8,
        }
    }

    /// Full-size shape: 3072-wide tokens, 19 double and 38 single blocks.
    /// Only used for shape and parameter arithmetic.
    pub fn flux() -> Self {
        ModelConfig {
            d_model: 3072,
            n_heads: 24,
            n_double: 19,
            n_single: 38,
            latent_channels: 16,
            patch: 2,
            text_token_dim: 4096,
            pooled_dim: 768,
            scalar_embed_dim: 256,
            rope: RopeConfig::new([16, 56, 56], 10_000.0),
            hidden_ratio: 4.0,
            qk_norm: true,
            temb_activation: true,
            order: TokenOrder::TextFirst,
            n_txt: 512,
        }
    }

    /// Small configuration for gradient checks (`d_model = 16`).
    pub fn tiny() -> Self {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            n_double: 1,
            n_single: 1,
            latent_channels: 1,
            patch: 2,
            text_token_dim: 6,
            pooled_dim: 5,
            scalar_embed_dim: 8,
            rope: RopeConfig::new([2, 2, 4], 10_000.0),
            hidden_ratio: 2.0,
            qk_norm: true,
            temb_activation: true,
            order: TokenOrder::TextFirst,
            n_txt: 2,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "flux-shape" | "flux" => Ok(Self::flux()),
            "tiny" => Ok(Self::tiny()),
            other => Err(FluxError::Config(format!(
                "unknown preset `{other}` (expected toy, flux-shape or tiny)"
            ))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Packed features per image token: `latent_channels · patch²`.
    pub fn in_channels(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn hidden(&self) -> usize {
        hidden_width(self.d_model, self.hidden_ratio).unwrap_or(0)
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            hidden: self.hidden(),
            qk_norm: self.qk_norm,
            temb_activation: self.temb_activation,
            order: self.order,
            ln_eps: LAYER_NORM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model != self.n_heads * self.d_head() {
            return Err(FluxError::Config(format!(
                "d_model {} is not n_heads {} x d_head",
                self.d_model, self.n_heads
            )));
        }
        hidden_width(self.d_model, self.hidden_ratio)?;
        self.rope.validate(self.d_head())?;
        self.block_config().validate()?;
        if self.scalar_embed_dim == 0 || !self.scalar_embed_dim.is_multiple_of(2) {
            return Err(FluxError::Config("scalar embedding width must be even".into()));
        }
        if self.latent_channels == 0 || self.patch == 0 {
            return Err(FluxError::Config("latent channels and patch must be >= 1".into()));
        }
        if self.text_token_dim == 0 || self.pooled_dim == 0 {
            return Err(FluxError::Config("text widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scalar conditioning for one transformer call.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceInputs {
    /// Sampling time `s ∈ [0, 1]`.
    pub timestep: f64,
    pub guidance: f64,
    pub pooled: Tensor,
}

impl GuidanceInputs {
    pub fn new(timestep: f64, guidance: f64, pooled: Tensor) -> Self {
        GuidanceInputs {
            timestep,
            guidance,
            pooled,
        }
    }
}

/// `linear → SiLU → linear`, mapping a vector to `d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEmbedder {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
struct EmbedderCache {
    x: Tensor,
    pre: Tensor,
    act: Tensor,
}

impl MlpEmbedder {
    fn new(d_in: usize, d: usize, rng: &mut Rng) -> Self {
        MlpEmbedder {
            fc1: Linear::uniform(d_in, d, rng),
            fc2: Linear::uniform(d, d, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, EmbedderCache)> {
        let pre = self.fc1.forward(x)?;
        let act = silu(&pre);
        let out = self.fc2.forward(&act)?;
        Ok((
            out,
            EmbedderCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    fn backward(&self, cache: &EmbedderCache, dy: &Tensor, grad: &mut MlpEmbedder) -> Result<()> {
        let dact = self.fc2.backward(&cache.act, dy, &mut grad.fc2)?;
        let dpre = silu_backward(&cache.pre, &dact);
        self.fc1.backward(&cache.x, &dpre, &mut grad.fc1)?;
        Ok(())
    }
}

impl Parameters for MlpEmbedder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc1.visit(&join(prefix, "linear_1"), f);
        self.fc2.visit(&join(prefix, "linear_2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc1.visit_mut(&join(prefix, "linear_1"), f);
        self.fc2.visit_mut(&join(prefix, "linear_2"), f);
    }
}

/// Modulated layer norm followed by the linear head back to packed latents.
#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer {
    /// `d → 2d`, split as `(shift, scale)`.
    pub modulation: Linear,
    pub proj: Linear,
    pub activation: bool,
}

impl Parameters for FinalLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.modulation.visit(&join(prefix, "norm_out"), f);
        self.proj.visit(&join(prefix, "proj_out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.modulation.visit_mut(&join(prefix, "norm_out"), f);
        self.proj.visit_mut(&join(prefix, "proj_out"), f);
    }
}

/// The full velocity network.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxTransformer {
    pub config: ModelConfig,
    pub img_in: Linear,
    pub txt_in: Linear,
    pub time_embed: MlpEmbedder,
    pub guidance_embed: MlpEmbedder,
    pub pooled_embed: MlpEmbedder,
    pub double_blocks: Vec<DoubleStreamBlock>,
    pub single_blocks: Vec<SingleStreamBlock>,
    pub final_layer: FinalLayer,
}

/// Activations saved by [`FluxTransformer::forward_cached`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    packed: Tensor,
    text: Tensor,
    time: EmbedderCache,
    guidance: EmbedderCache,
    pooled: EmbedderCache,
    temb: Tensor,
    double: Vec<DoubleStreamCache>,
    single: Vec<SingleStreamCache>,
    final_x: Tensor,
    final_c: Tensor,
    final_n: Tensor,
    final_shift_scale: (Tensor, Tensor),
    final_m: Tensor,
    n_txt: usize,
    n_img: usize,
}

impl ForwardCache {
    pub fn temb(&self) -> &Tensor {
        &self.temb
    }

    pub fn double_caches(&self) -> &[DoubleStreamCache] {
        &self.double
    }

    pub fn single_caches(&self) -> &[SingleStreamCache] {
        &self.single
    }
}

impl FluxTransformer {
    /// Builds a model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, init: InitScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let d = config.d_model;
        let bc = config.block_config();
        let img_in = Linear::uniform(config.in_channels(), d, &mut rng);
        let txt_in = Linear::uniform(config.text_token_dim, d, &mut rng);
        let time_embed = MlpEmbedder::new(config.scalar_embed_dim, d, &mut rng);
        let guidance_embed = MlpEmbedder::new(config.scalar_embed_dim, d, &mut rng);
        let pooled_embed = MlpEmbedder::new(config.pooled_dim, d, &mut rng);
        let double_blocks = (0..config.n_double)
            .map(|_| DoubleStreamBlock::new(&bc, init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let single_blocks = (0..config.n_single)
            .map(|_| SingleStreamBlock::new(&bc, init, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let zero_head = init == InitScheme::AdaLnZero;
        let (modulation, proj) = if zero_head {
            (Linear::zeros(d, 2 * d), Linear::zeros(d, config.in_channels()))
        } else {
            (
                Linear::uniform(d, 2 * d, &mut rng),
                Linear::uniform(d, config.in_channels(), &mut rng),
            )
        };
        Ok(FluxTransformer {
            final_layer: FinalLayer {
                modulation,
                proj,
                activation: config.temb_activation,
            },
            config,
            img_in,
            txt_in,
            time_embed,
            guidance_embed,
            pooled_embed,
            double_blocks,
            single_blocks,
        })
    }

    /// A same-shaped model with every parameter zero; used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.zero_all();
        z
    }

    /// Sum of the projected timestep, guidance and pooled-text embeddings.
    pub fn build_temb(&self, g: &GuidanceInputs) -> Result<Tensor> {
        Ok(self.temb_cached(g)?.0)
    }

    fn temb_cached(
        &self,
        g: &GuidanceInputs,
    ) -> Result<(Tensor, EmbedderCache, EmbedderCache, EmbedderCache)> {
        let cfg = &self.config;
        if g.pooled.len() != cfg.pooled_dim {
            return Err(FluxError::shape(
                "build_temb pooled",
                g.pooled.shape(),
                &[cfg.pooled_dim],
            ));
        }
        let t = sinusoidal_embed(g.timestep * TIMESTEP_SCALE, cfg.scalar_embed_dim, MAX_PERIOD)?;
        let gd = sinusoidal_embed(g.guidance * TIMESTEP_SCALE, cfg.scalar_embed_dim, MAX_PERIOD)?;
        let pooled = g.pooled.clone().reshape([cfg.pooled_dim])?;
        let (te, tc) = self.time_embed.forward_cached(&t)?;
        let (ge, gc) = self.guidance_embed.forward_cached(&gd)?;
        let (pe, pc) = self.pooled_embed.forward_cached(&pooled)?;
        let temb = te.add(&ge)?.add(&pe)?;
        Ok((temb, tc, gc, pc))
    }

    /// Projects image and text tokens to `d_model`.
    pub fn embed_inputs(&self, packed_latents: &Tensor, text_embeds: &Tensor) -> Result<StreamState> {
        let cfg = &self.config;
        if packed_latents.rank() != 2 || packed_latents.last_dim() != cfg.in_channels() {
            return Err(FluxError::shape(
                "embed_inputs latents",
                packed_latents.shape(),
                &[packed_latents.rows(), cfg.in_channels()],
            ));
        }
        if text_embeds.rank() != 2 || text_embeds.last_dim() != cfg.text_token_dim {
            return Err(FluxError::shape(
                "embed_inputs text",
                text_embeds.shape(),
                &[text_embeds.rows(), cfg.text_token_dim],
            ));
        }
        Ok(StreamState::new(
            self.img_in.forward(packed_latents)?,
            self.txt_in.forward(text_embeds)?,
        ))
    }

    pub fn rope_tables(&self, ids: &TokenIds) -> Result<RopeTables> {
        build_rope_tables(ids, &self.config.rope)
    }

    /// Predicts the packed-latent velocity. `ids` cover the joint sequence
    /// in the configured token order.
    pub fn forward(
        &self,
        packed_latents: &Tensor,
        text_embeds: &Tensor,
        ids: &TokenIds,
        g: &GuidanceInputs,
    ) -> Result<Tensor> {
        let rope = self.rope_tables(ids)?;
        self.forward_with_rope(packed_latents, text_embeds, &rope, g)
    }

    /// [`forward`](Self::forward) with precomputed rotary tables.
    pub fn forward_with_rope(
        &self,
        packed_latents: &Tensor,
        text_embeds: &Tensor,
        rope: &RopeTables,
        g: &GuidanceInputs,
    ) -> Result<Tensor> {
        Ok(self.forward_cached(packed_latents, text_embeds, rope, g)?.0)
    }

    pub fn forward_cached(
        &self,
        packed_latents: &Tensor,
        text_embeds: &Tensor,
        rope: &RopeTables,
        g: &GuidanceInputs,
    ) -> Result<(Tensor, ForwardCache)> {
        let cfg = &self.config;
        let mut state = self.embed_inputs(packed_latents, text_embeds)?;
        let (n_img, n_txt) = (state.n_img(), state.n_txt());
        if rope.len() != n_img + n_txt {
            return Err(FluxError::shape(
                "forward ids",
                &[rope.len()],
                &[n_txt + n_img],
            ));
        }
        let (temb, time, guidance, pooled) = self.temb_cached(g)?;

        let mut double = Vec::with_capacity(self.double_blocks.len());
        for block in &self.double_blocks {
            let (next, cache) = block.forward_cached(&state, &temb, rope)?;
            double.push(cache);
            state = next;
        }

        let mut joint = cfg
            .order
            .concat(&state.encoder_hidden_states, &state.hidden_states)?;
        let mut single = Vec::with_capacity(self.single_blocks.len());
        for block in &self.single_blocks {
            let (next, cache) = block.forward_cached(&joint, &temb, rope)?;
            single.push(cache);
            joint = next;
        }
        let (_, img_range) = cfg.order.ranges(n_txt, n_img);
        let final_x = joint.slice_rows(img_range);

        let head = &self.final_layer;
        let final_c = if head.activation { silu(&temb) } else { temb.clone() };
        let mods = head.modulation.forward(&final_c)?.chunk(2)?;
        let (shift, scale) = (mods[0].clone(), mods[1].clone());
        let final_n = layer_norm(&final_x, LAYER_NORM_EPS)?;
        let final_m = modulate(&final_n, &shift, &scale)?;
        let out = head.proj.forward(&final_m)?.ensure_finite("forward")?;

        let cache = ForwardCache {
            packed: packed_latents.clone(),
            text: text_embeds.clone(),
            time,
            guidance,
            pooled,
            temb,
            double,
            single,
            final_x,
            final_c,
            final_n,
            final_shift_scale: (shift, scale),
            final_m,
            n_txt,
            n_img,
        };
        Ok((out, cache))
    }

    /// Backpropagates `d_out` (same shape as the forward output) and
    /// returns parameter gradients in a model-shaped buffer.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        rope: &RopeTables,
        d_out: &Tensor,
    ) -> Result<FluxTransformer> {
        let cfg = &self.config;
        let mut grad = self.zeros_like();
        let (n_txt, n_img) = (cache.n_txt, cache.n_img);
        let head = &self.final_layer;

        let d_m = head
            .proj
            .backward(&cache.final_m, d_out, &mut grad.final_layer.proj)?;
        let (_, scale) = &cache.final_shift_scale;
        let d_n = d_m.mul_row(&scale.map(|s| 1.0 + s))?;
        let d_shift = d_m.sum_rows();
        let d_scale = d_m.mul(&cache.final_n)?.sum_rows();
        let d_mods = Tensor::from_vec([d_shift.data(), d_scale.data()].concat());
        let d_c = head
            .modulation
            .backward(&cache.final_c, &d_mods, &mut grad.final_layer.modulation)?;
        let mut d_temb = if head.activation {
            silu_backward(&cache.temb, &d_c)
        } else {
            d_c
        };
        let d_final_x = layer_norm_backward(&cache.final_x, &cache.final_n, &d_n, LAYER_NORM_EPS);

        let mut d_joint = Tensor::zeros([n_txt + n_img, cfg.d_model]);
        let (txt_range, img_range) = cfg.order.ranges(n_txt, n_img);
        for (k, i) in img_range.clone().enumerate() {
            d_joint.row_mut(i).copy_from_slice(d_final_x.row(k));
        }
        for (i, block) in self.single_blocks.iter().enumerate().rev() {
            let (dx, dt) =
                block.backward(&cache.single[i], &d_joint, &mut grad.single_blocks[i], rope)?;
            d_temb.add_assign(&dt)?;
            d_joint = dx;
        }
        let mut d_state = StreamState::new(d_joint.slice_rows(img_range), d_joint.slice_rows(txt_range));
        for (i, block) in self.double_blocks.iter().enumerate().rev() {
            let (ds, dt) =
                block.backward(&cache.double[i], &d_state, &mut grad.double_blocks[i], rope)?;
            d_temb.add_assign(&dt)?;
            d_state = ds;
        }
        self.img_in
            .backward(&cache.packed, &d_state.hidden_states, &mut grad.img_in)?;
        self.txt_in
            .backward(&cache.text, &d_state.encoder_hidden_states, &mut grad.txt_in)?;
        self.time_embed
            .backward(&cache.time, &d_temb, &mut grad.time_embed)?;
        self.guidance_embed
            .backward(&cache.guidance, &d_temb, &mut grad.guidance_embed)?;
        self.pooled_embed
            .backward(&cache.pooled, &d_temb, &mut grad.pooled_embed)?;
        Ok(grad)
    }

    /// Writes every parameter to a weight container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write_file(path, &self.named_tensors())
    }

    /// Loads parameters saved by [`save`](Self::save) into a model of the
    /// given configuration. Names and shapes must match exactly.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let tensors = weights::read_file(path)?;
        let mut model = FluxTransformer::new(config, InitScheme::AdaLnZero, 0)?;
        model.assign_named(tensors)?;
        Ok(model)
    }

    pub fn assign_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        let expected = self.param_names();
        if expected.len() != tensors.len() {
            return Err(FluxError::Format(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut lookup: std::collections::HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut failure = None;
        self.visit_mut("", &mut |name, t| {
            if failure.is_some() {
                return;
            }
            match lookup.remove(name) {
                Some(src) if src.shape() == t.shape() => *t = src,
                Some(src) => {
                    failure = Some(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    ))
                }
                None => failure = Some(format!("missing tensor `{name}`")),
            }
        });
        match failure {
            Some(msg) => Err(FluxError::Format(msg)),
            None => Ok(()),
        }
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n.to_owned()));
        names
    }
}

impl Parameters for FluxTransformer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.img_in.visit(&join(prefix, "x_embedder"), f);
        self.txt_in.visit(&join(prefix, "context_embedder"), f);
        self.time_embed.visit(&join(prefix, "time_text_embed.timestep_embedder"), f);
        self.guidance_embed.visit(&join(prefix, "time_text_embed.guidance_embedder"), f);
        self.pooled_embed.visit(&join(prefix, "time_text_embed.text_embedder"), f);
        for (i, b) in self.double_blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("transformer_blocks.{i}")), f);
        }
        for (i, b) in self.single_blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("single_transformer_blocks.{i}")), f);
        }
        self.final_layer.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.img_in.visit_mut(&join(prefix, "x_embedder"), f);
        self.txt_in.visit_mut(&join(prefix, "context_embedder"), f);
        self.time_embed
            .visit_mut(&join(prefix, "time_text_embed.timestep_embedder"), f);
        self.guidance_embed
            .visit_mut(&join(prefix, "time_text_embed.guidance_embedder"), f);
        self.pooled_embed
            .visit_mut(&join(prefix, "time_text_embed.text_embedder"), f);
        for (i, b) in self.double_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("transformer_blocks.{i}")), f);
        }
        for (i, b) in self.single_blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("single_transformer_blocks.{i}")), f);
        }
        self.final_layer.visit_mut(prefix, f);
    }
}

/// Parameters of a dense layer with bias.
pub fn linear_params(d_in: usize, d_out: usize) -> u64 {
    (d_in as u64) * (d_out as u64) + d_out as u64
}

/// Closed-form parameter counts per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub input_projections: u64,
    pub conditioning: u64,
    pub per_double_block: u64,
    pub per_single_block: u64,
    pub final_layer: u64,
    pub n_double: usize,
    pub n_single: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> u64 {
        self.input_projections
            + self.conditioning
            + self.per_double_block * self.n_double as u64
            + self.per_single_block * self.n_single as u64
            + self.final_layer
    }
}

/// Parameter arithmetic from the configuration alone (no allocation).
///
/// * stream (×2 per double block): `lin(d,6d) + 4·lin(d,d) + qk + lin(d,h) + lin(h,d)`
/// * single block: `lin(d,3d) + 3·lin(d,d) + qk + lin(d,h) + lin(d+h,d)`
/// * `qk = 2·d_head` when Q/K normalization is enabled
pub fn param_breakdown(cfg: &ModelConfig) -> ParamBreakdown {
    let d = cfg.d_model;
    let h = cfg.hidden();
    let qk = if cfg.qk_norm { 2 * cfg.d_head() as u64 } else { 0 };
    let embedder = |d_in: usize| linear_params(d_in, d) + linear_params(d, d);
    let stream = linear_params(d, 6 * d)
        + 4 * linear_params(d, d)
        + qk
        + linear_params(d, h)
        + linear_params(h, d);
    let single = linear_params(d, 3 * d)
        + 3 * linear_params(d, d)
        + qk
        + linear_params(d, h)
        + linear_params(d + h, d);
    ParamBreakdown {
        input_projections: linear_params(cfg.in_channels(), d) + linear_params(cfg.text_token_dim, d),
        conditioning: 2 * embedder(cfg.scalar_embed_dim) + embedder(cfg.pooled_dim),
        per_double_block: 2 * stream,
        per_single_block: single,
        final_layer: linear_params(d, 2 * d) + linear_params(d, cfg.in_channels()),
        n_double: cfg.n_double,
        n_single: cfg.n_single,
    }
}

pub fn count_params(cfg: &ModelConfig) -> u64 {
    param_breakdown(cfg).total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{build_img_ids, build_text_ids};
    use crate::numerics::randn;

    fn inputs(cfg: &ModelConfig, n_img_side: usize, seed: u64) -> (Tensor, Tensor, TokenIds, GuidanceInputs) {
        let mut rng = Rng::new(seed);
        let n_img = n_img_side * n_img_side;
        let packed = randn(&mut rng, [n_img, cfg.in_channels()]);
        let text = randn(&mut rng, [cfg.n_txt, cfg.text_token_dim]);
        let ids = cfg
            .order
            .join_ids(&build_text_ids(cfg.n_txt), &build_img_ids(n_img_side, n_img_side).unwrap());
        let g = GuidanceInputs::new(0.3, 0.35, randn(&mut rng, [cfg.pooled_dim]));
        (packed, text, ids, g)
    }

    #[test]
    fn linear_param_count() {
        assert_eq!(linear_params(2, 3), 9);
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for cfg in [ModelConfig::toy(), ModelConfig::tiny()] {
            let model = FluxTransformer::new(cfg.clone(), InitScheme::AdaLnZero, 1).unwrap();
            assert_eq!(model.param_count() as u64, count_params(&cfg));
        }
        let mut no_qk = ModelConfig::tiny();
        no_qk.qk_norm = false;
        let model = FluxTransformer::new(no_qk.clone(), InitScheme::Dense, 1).unwrap();
        assert_eq!(model.param_count() as u64, count_params(&no_qk));
    }

    #[test]
    fn flux_shape_lands_near_twelve_billion() {
        let n = count_params(&ModelConfig::flux());
        assert!((11_000_000_000..=13_000_000_000).contains(&n), "{n}");
    }

    #[test]
    fn zero_branches_give_zero_temb() {
        let mut model = FluxTransformer::new(ModelConfig::tiny(), InitScheme::Dense, 2).unwrap();
        model.time_embed.zero_all();
        model.guidance_embed.zero_all();
        model.pooled_embed.zero_all();
        let g = GuidanceInputs::new(0.5, 0.35, Tensor::full([5], 1.0));
        assert!(model.build_temb(&g).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = GuidanceInputs::new(0.5, 0.35, Tensor::full([4], 1.0));
        assert!(model.build_temb(&bad).is_err());
    }

    #[test]
    fn temb_separates_grid_timesteps() {
        let model = FluxTransformer::new(ModelConfig::toy(), InitScheme::AdaLnZero, 3).unwrap();
        let pooled = randn(&mut Rng::new(4), [32]);
        let grid = crate::rf_math::make_time_grid(16).unwrap();
        let embs: Vec<Tensor> = grid
            .times()
            .iter()
            .map(|&s| model.build_temb(&GuidanceInputs::new(s, 0.35, pooled.clone())).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert!(embs[i].max_abs_diff(&embs[j]).unwrap() > 1e-9, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn embed_inputs_examples() {
        let mut cfg = ModelConfig::tiny();
        cfg.d_model = 48;
        cfg.n_heads = 6;
        cfg.latent_channels = 16;
        cfg.text_token_dim = 32;
        let mut model = FluxTransformer::new(cfg, InitScheme::AdaLnZero, 5).unwrap();
        let mut rng = Rng::new(6);
        let lat = randn(&mut rng, [16, 64]);
        let txt = randn(&mut rng, [8, 32]);
        let s = model.embed_inputs(&lat, &txt).unwrap();
        assert_eq!(s.hidden_states.shape(), &[16, 48]);
        assert_eq!(s.encoder_hidden_states.shape(), &[8, 48]);
        model.img_in.zero_all();
        model.txt_in.zero_all();
        let s = model.embed_inputs(&lat, &txt).unwrap();
        assert!(s.hidden_states.data().iter().all(|&v| v == 0.0));
        assert!(s.encoder_hidden_states.data().iter().all(|&v| v == 0.0));
        assert!(model.embed_inputs(&txt, &lat).is_err());
    }

    #[test]
    fn identity_projections_pass_through() {
        let mut cfg = ModelConfig::tiny();
        cfg.latent_channels = 4;
        cfg.text_token_dim = 16;
        let mut model = FluxTransformer::new(cfg, InitScheme::AdaLnZero, 5).unwrap();
        model.img_in = Linear::identity(16);
        model.txt_in = Linear::identity(16);
        let mut rng = Rng::new(6);
        let lat = randn(&mut rng, [4, 16]);
        let txt = randn(&mut rng, [2, 16]);
        let s = model.embed_inputs(&lat, &txt).unwrap();
        assert_eq!(s.hidden_states, lat);
        assert_eq!(s.encoder_hidden_states, txt);
    }

    #[test]
    fn zero_init_model_predicts_zero_velocity() {
        let cfg = ModelConfig::toy();
        let model = FluxTransformer::new(cfg.clone(), InitScheme::AdaLnZero, 7).unwrap();
        let (p, t, ids, g) = inputs(&cfg, 4, 8);
        let v = model.forward(&p, &t, &ids, &g).unwrap();
        assert_eq!(v.shape(), &[16, 64]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn guidance_changes_output_unless_branch_is_zero() {
        let cfg = ModelConfig::tiny();
        let mut model = FluxTransformer::new(cfg.clone(), InitScheme::Dense, 9).unwrap();
        let (p, t, ids, g) = inputs(&cfg, 2, 10);
        let mut g2 = g.clone();
        g2.guidance *= 2.0;
        let a = model.forward(&p, &t, &ids, &g).unwrap();
        let b = model.forward(&p, &t, &ids, &g2).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 1e-9);
        model.guidance_embed.zero_all();
        let a = model.forward(&p, &t, &ids, &g).unwrap();
        let b = model.forward(&p, &t, &ids, &g2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_rejects_mismatched_ids() {
        let cfg = ModelConfig::tiny();
        let model = FluxTransformer::new(cfg.clone(), InitScheme::Dense, 9).unwrap();
        let (p, t, _, g) = inputs(&cfg, 2, 10);
        let short = build_img_ids(2, 2).unwrap();
        assert!(model.forward(&p, &t, &short, &g).is_err());
    }

    #[test]
    fn output_shape_ignores_text_length() {
        let mut cfg = ModelConfig::tiny();
        for n_txt in [0, 1, 5] {
            cfg.n_txt = n_txt;
            let model = FluxTransformer::new(cfg.clone(), InitScheme::Dense, 11).unwrap();
            let (p, t, ids, g) = inputs(&cfg, 2, 12);
            assert_eq!(model.forward(&p, &t, &ids, &g).unwrap().shape(), &[4, 4]);
        }
    }

    #[test]
    fn presets_validate() {
        ModelConfig::toy().validate().unwrap();
        ModelConfig::flux().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert!(ModelConfig::preset("huge").is_err());
        let mut bad = ModelConfig::toy();
        bad.rope = RopeConfig::new([4, 4, 4], 1e4);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn model_backward_matches_finite_differences() {
        use crate::numerics::grad_check_at;
        use crate::rf_math::{rf_loss, rf_loss_grad};
        let cfg = ModelConfig::tiny();
        let model = FluxTransformer::new(cfg.clone(), InitScheme::Dense, 13).unwrap();
        let (p, t, ids, g) = inputs(&cfg, 2, 14);
        let mut rng = Rng::new(15);
        let x0 = randn(&mut rng, [4, cfg.in_channels()]);
        let x1 = randn(&mut rng, [4, cfg.in_channels()]);
        let rope = model.rope_tables(&ids).unwrap();
        let (v, cache) = model.forward_cached(&p, &t, &rope, &g).unwrap();
        let grad = model
            .backward(&cache, &rope, &rf_loss_grad(&v, &x0, &x1).unwrap())
            .unwrap();
        let grads: std::collections::HashMap<String, Tensor> =
            grad.named_tensors().into_iter().collect();
        for (name, theta) in model.named_tensors() {
            let coords: Vec<usize> = (0..theta.len()).step_by(5).collect();
            let mut probe = model.clone();
            let err = grad_check_at(
                |w| {
                    probe.visit_mut("", &mut |n, x| {
                        if n == name {
                            *x = w.clone();
                        }
                    });
                    rf_loss(&probe.forward_with_rope(&p, &t, &rope, &g)?, &x0, &x1)
                },
                &theta,
                &grads[&name],
                1e-5,
                &coords,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
