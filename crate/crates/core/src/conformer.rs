//! Conformer encoder: input projection, three blocks of conformer layers with a
//! time-stacking reduction after block 1 and a projection back to the model
//! dim after block 2, and hook points where reprogramming or adapter modules
//! insert.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{uniform, Ctx, ParamStore, Role};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConformerConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub conv_kernel_size: usize,
    pub ffn_expansion: usize,
    /// Conformer layers in blocks 1, 2 and 3.
    pub block_layout: [usize; 3],
    pub time_stack_factor: usize,
    pub rel_pos_max_distance: usize,
    pub norm_groups: usize,
    pub dropout: f64,
    /// Require a single-layer block 2.
    pub strict_layout: bool,
}

impl Default for ConformerConfig {
    fn default() -> Self {
        ConformerConfig {
            input_dim: 80,
            model_dim: 64,
            num_heads: 4,
            conv_kernel_size: 7,
            ffn_expansion: 4,
            block_layout: [2, 1, 3],
            time_stack_factor: 2,
            rel_pos_max_distance: 8,
            norm_groups: 4,
            dropout: 0.0,
            strict_layout: true,
        }
    }
}

impl ConformerConfig {
    /// 17-layer (4, 1, 12) layout at the given model dim.
    pub fn deep_layout(model_dim: usize) -> Self {
        ConformerConfig {
            model_dim,
            block_layout: [4, 1, 12],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [n1, n2, n3] = self.block_layout;
        let bad = |m: String| Err(Error::config(m));
        if self.num_heads == 0 || !self.model_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            ));
        }
        if n1 == 0 || n3 == 0 {
            return bad(format!("blocks 1 and 3 need at least one layer, got {:?}", self.block_layout));
        }
        if self.strict_layout && n2 != 1 {
            return bad(format!("block 2 must hold exactly one layer, got {n2}"));
        }
        if self.time_stack_factor == 0 {
            return bad("time_stack_factor must be >= 1".into());
        }
        if self.conv_kernel_size.is_multiple_of(2) {
            return bad(format!("conv_kernel_size {} must be odd", self.conv_kernel_size));
        }
        if self.norm_groups == 0 || !self.model_dim.is_multiple_of(self.norm_groups) {
            return bad(format!(
                "model_dim {} not divisible into {} norm groups",
                self.model_dim, self.norm_groups
            ));
        }
        if self.input_dim == 0 || self.ffn_expansion == 0 {
            return bad("input_dim and ffn_expansion must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.block_layout.iter().sum()
    }

    /// Block (0, 1 or 2) holding global layer `i`.
    pub fn block_of(&self, i: usize) -> usize {
        let [n1, n2, _] = self.block_layout;
        if i < n1 {
            0
        } else if i < n1 + n2 {
            1
        } else {
            2
        }
    }

    /// Feature width seen by layer `i`.
    pub fn layer_dim(&self, i: usize) -> usize {
        if self.block_of(i) == 1 {
            self.model_dim * self.time_stack_factor
        } else {
            self.model_dim
        }
    }

    /// Width of the tensor entering `point`.
    pub fn point_dim(&self, point: InsertionPoint) -> usize {
        match point {
            InsertionPoint::Input => self.input_dim,
            InsertionPoint::Boundary(i) => self.layer_dim(i),
        }
    }

    /// Every valid insertion point: the input plus each inter-layer boundary.
    pub fn insertion_points(&self) -> Vec<InsertionPoint> {
        std::iter::once(InsertionPoint::Input)
            .chain((1..self.num_layers()).map(InsertionPoint::Boundary))
            .collect()
    }

    pub fn has_point(&self, point: InsertionPoint) -> bool {
        match point {
            InsertionPoint::Input => true,
            InsertionPoint::Boundary(i) => i >= 1 && i < self.num_layers(),
        }
    }

    /// Output frames for `t` input frames.
    pub fn output_frames(&self, t: usize) -> usize {
        t.div_ceil(self.time_stack_factor)
    }
}

/// Where a hook sees the encoder stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InsertionPoint {
    /// Raw input features, before the input projection.
    Input,
    /// Tensor entering layer `i` (`i >= 1`), after any stacking or projection.
    Boundary(usize),
}

impl InsertionPoint {
    pub fn tag(self) -> String {
        match self {
            InsertionPoint::Input => "input".into(),
            InsertionPoint::Boundary(i) => format!("b{i}"),
        }
    }
}

/// Module applied to the encoder stream at one insertion point.
pub trait EncoderHook<S: Scalar> {
    fn point(&self) -> InsertionPoint;

    /// `h` enters the next layer; `h_prev` is the previous layer's output when
    /// its shape matches `h`.
    fn apply(&self, ctx: &mut Ctx<S>, h: Var, h_prev: Option<Var>) -> Result<Var>;
}

/// Passes the stream through unchanged.
pub struct IdentityHook(pub InsertionPoint);

impl<S: Scalar> EncoderHook<S> for IdentityHook {
    fn point(&self) -> InsertionPoint {
        self.0
    }

    fn apply(&self, _ctx: &mut Ctx<S>, h: Var, _h_prev: Option<Var>) -> Result<Var> {
        Ok(h)
    }
}

/// Hooks in registration order.
pub struct HookSet<'h, S: Scalar> {
    hooks: Vec<Box<dyn EncoderHook<S> + 'h>>,
}

impl<'h, S: Scalar> Default for HookSet<'h, S> {
    fn default() -> Self {
        HookSet { hooks: Vec::new() }
    }
}

impl<'h, S: Scalar> HookSet<'h, S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, hook: impl EncoderHook<S> + 'h) {
        self.hooks.push(Box::new(hook));
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn validate(&self, cfg: &ConformerConfig) -> Result<()> {
        for h in &self.hooks {
            if !cfg.has_point(h.point()) {
                return Err(Error::config(format!(
                    "hook at nonexistent insertion point {:?} ({} layers)",
                    h.point(),
                    cfg.num_layers()
                )));
            }
        }
        Ok(())
    }

    fn run(
        &self,
        ctx: &mut Ctx<S>,
        point: InsertionPoint,
        mut h: Var,
        h_prev: Option<Var>,
    ) -> Result<Var> {
        for hook in self.hooks.iter().filter(|k| k.point() == point) {
            h = hook.apply(ctx, h, h_prev)?;
        }
        Ok(h)
    }
}

/// Input features `[T x F]`, `T >= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<S = f32> {
    pub frames: Tensor<S>,
}

impl<S: Scalar> FeatureSequence<S> {
    pub fn new(t: usize, f: usize, data: Vec<S>) -> Result<Self> {
        if t == 0 {
            return Err(Error::EmptyInput("feature sequence has no frames"));
        }
        Ok(FeatureSequence {
            frames: Tensor::new(&[t, f], data)?,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    Xavier(usize, usize),
    Zeros,
    Ones,
}

/// Declarative parameter list: `(name, shape, role, init)`.
pub(crate) type ParamSpec = Vec<(String, Vec<usize>, Role, Init)>;

pub(crate) fn linear_spec(spec: &mut ParamSpec, prefix: &str, fan_in: usize, fan_out: usize) {
    spec.push((format!("{prefix}.w"), vec![fan_in, fan_out], Role::Weight, Init::Xavier(fan_in, fan_out)));
    spec.push((format!("{prefix}.b"), vec![fan_out], Role::Bias, Init::Zeros));
}

pub(crate) fn norm_spec(spec: &mut ParamSpec, prefix: &str, dim: usize) {
    spec.push((format!("{prefix}.gamma"), vec![dim], Role::Weight, Init::Ones));
    spec.push((format!("{prefix}.beta"), vec![dim], Role::Bias, Init::Zeros));
}

pub(crate) fn materialize<S: Scalar>(store: &mut ParamStore<S>, spec: ParamSpec, rng: &mut ChaCha8Rng) {
    for (name, shape, role, init) in spec {
        let value = match init {
            Init::Xavier(i, o) => uniform(&shape, (6.0 / (i + o) as f64).sqrt(), rng),
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, S::one()),
        };
        store.insert(name, value, role);
    }
}

/// Parameters of one conformer layer at width `dim`.
pub(crate) fn layer_spec(prefix: &str, dim: usize, cfg: &ConformerConfig) -> ParamSpec {
    let mut s = ParamSpec::new();
    let hidden = dim * cfg.ffn_expansion;
    for ffn in ["ffn1", "ffn2"] {
        norm_spec(&mut s, &format!("{prefix}.{ffn}.ln"), dim);
        linear_spec(&mut s, &format!("{prefix}.{ffn}.l1"), dim, hidden);
        linear_spec(&mut s, &format!("{prefix}.{ffn}.l2"), hidden, dim);
    }
    norm_spec(&mut s, &format!("{prefix}.mhsa.ln"), dim);
    for proj in ["q", "k", "v", "o"] {
        linear_spec(&mut s, &format!("{prefix}.mhsa.{proj}"), dim, dim);
    }
    let span = 2 * cfg.rel_pos_max_distance + 1;
    s.push((
        format!("{prefix}.mhsa.rel_bias"),
        vec![cfg.num_heads, span],
        Role::Weight,
        Init::Zeros,
    ));
    norm_spec(&mut s, &format!("{prefix}.conv.ln"), dim);
    linear_spec(&mut s, &format!("{prefix}.conv.pw1"), dim, 2 * dim);
    let k = cfg.conv_kernel_size;
    s.push((format!("{prefix}.conv.dw.w"), vec![k, dim], Role::Weight, Init::Xavier(k, k)));
    s.push((format!("{prefix}.conv.dw.b"), vec![dim], Role::Bias, Init::Zeros));
    norm_spec(&mut s, &format!("{prefix}.conv.gn"), dim);
    linear_spec(&mut s, &format!("{prefix}.conv.pw2"), dim, dim);
    norm_spec(&mut s, &format!("{prefix}.ln_out"), dim);
    s
}

pub const ENCODER_PREFIX: &str = "encoder";
/// Prefix of the optional conformer layer appended after block 3.
pub const EXTRA_LAYER_PREFIX: &str = "encoder.extra";

pub fn layer_prefix(i: usize) -> String {
    format!("{ENCODER_PREFIX}.layers.{i}")
}

pub(crate) fn encoder_spec(cfg: &ConformerConfig) -> ParamSpec {
    let mut s = ParamSpec::new();
    linear_spec(&mut s, "encoder.input_proj", cfg.input_dim, cfg.model_dim);
    for i in 0..cfg.num_layers() {
        s.extend(layer_spec(&layer_prefix(i), cfg.layer_dim(i), cfg));
    }
    linear_spec(
        &mut s,
        "encoder.stack_proj",
        cfg.model_dim * cfg.time_stack_factor,
        cfg.model_dim,
    );
    s
}

pub fn init_encoder<S: Scalar>(store: &mut ParamStore<S>, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) {
    materialize(store, encoder_spec(cfg), rng);
}

/// Adds a randomly initialized conformer layer after block 3.
pub fn init_extra_layer<S: Scalar>(store: &mut ParamStore<S>, cfg: &ConformerConfig, rng: &mut ChaCha8Rng) {
    materialize(store, layer_spec(EXTRA_LAYER_PREFIX, cfg.model_dim, cfg), rng);
}

/// Number of parameters in one conformer layer of width `dim`.
pub fn layer_param_count(dim: usize, cfg: &ConformerConfig) -> usize {
    layer_spec("x", dim, cfg)
        .iter()
        .map(|(_, shape, _, _)| shape.iter().product::<usize>())
        .sum()
}

pub fn encoder_param_count(cfg: &ConformerConfig) -> usize {
    encoder_spec(cfg)
        .iter()
        .map(|(_, shape, _, _)| shape.iter().product::<usize>())
        .sum()
}

fn ffn<S: Scalar>(ctx: &mut Ctx<S>, prefix: &str, x: Var, dropout: f64, layer: u64) -> Result<Var> {
    let h = ctx.layer_norm(&format!("{prefix}.ln"), x)?;
    let h = ctx.linear(&format!("{prefix}.l1"), h)?;
    let h = ctx.g.swish(h);
    let h = ctx.dropout(h, dropout, layer)?;
    let h = ctx.linear(&format!("{prefix}.l2"), h)?;
    ctx.dropout(h, dropout, layer + 1)
}

/// Indices into a `[H x (2R+1)]` table giving each head's `[T x T]` bias,
/// with relative distances clipped to `±R`.
pub fn rel_pos_indices(t: usize, head: usize, max_distance: usize) -> Vec<usize> {
    let span = 2 * max_distance + 1;
    let r = max_distance as isize;
    (0..t * t)
        .map(|k| {
            let (i, j) = ((k / t) as isize, (k % t) as isize);
            let d = (j - i).clamp(-r, r);
            head * span + (d + r) as usize
        })
        .collect()
}

/// Per-head attention probabilities of the last forward, for inspection.
pub struct AttentionProbs {
    pub probs: Vec<Var>,
}

fn mhsa<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    x: Var,
    cfg: &ConformerConfig,
    layer: u64,
    probs_out: Option<&mut AttentionProbs>,
) -> Result<Var> {
    let (t, dim) = (ctx.g.shape(x)[0], ctx.g.shape(x)[1]);
    let heads = cfg.num_heads;
    let dh = dim / heads;
    let h = ctx.layer_norm(&format!("{prefix}.ln"), x)?;
    let q = ctx.linear(&format!("{prefix}.q"), h)?;
    let k = ctx.linear(&format!("{prefix}.k"), h)?;
    let v = ctx.linear(&format!("{prefix}.v"), h)?;
    let table = ctx.p(&format!("{prefix}.rel_bias"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = ctx.g.slice_cols(q, hd * dh, dh)?;
        let kh = ctx.g.slice_cols(k, hd * dh, dh)?;
        let vh = ctx.g.slice_cols(v, hd * dh, dh)?;
        let kt = ctx.g.transpose(kh)?;
        let scores = ctx.g.matmul(qh, kt)?;
        let scores = ctx.g.scale(scores, scale);
        let bias = ctx
            .g
            .gather(table, &rel_pos_indices(t, hd, cfg.rel_pos_max_distance), &[t, t])?;
        let scores = ctx.g.add(scores, bias)?;
        let p = ctx.g.softmax(scores);
        probs.push(p);
        outs.push(ctx.g.matmul(p, vh)?);
    }
    if let Some(out) = probs_out {
        out.probs = probs;
    }
    let att = ctx.g.concat_cols(&outs)?;
    let o = ctx.linear(&format!("{prefix}.o"), att)?;
    ctx.dropout(o, cfg.dropout, layer)
}

fn conv_module<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    x: Var,
    cfg: &ConformerConfig,
    layer: u64,
) -> Result<Var> {
    let h = ctx.layer_norm(&format!("{prefix}.ln"), x)?;
    let h = ctx.linear(&format!("{prefix}.pw1"), h)?;
    let h = ctx.g.glu(h)?;
    let w = ctx.p(&format!("{prefix}.dw.w"))?;
    let b = ctx.p(&format!("{prefix}.dw.b"))?;
    let h = ctx.g.depthwise_conv1d(h, w)?;
    let h = ctx.g.add_bias(h, b)?;
    let gamma = ctx.p(&format!("{prefix}.gn.gamma"))?;
    let beta = ctx.p(&format!("{prefix}.gn.beta"))?;
    let h = ctx.g.group_norm(h, gamma, beta, cfg.norm_groups)?;
    let h = ctx.g.swish(h);
    let h = ctx.linear(&format!("{prefix}.pw2"), h)?;
    ctx.dropout(h, cfg.dropout, layer)
}

/// One macaron conformer layer: ½FFN, relative-position MHSA, convolution
/// module, ½FFN, each residual, then a final layer norm.
pub fn conformer_block_forward<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    x: Var,
    cfg: &ConformerConfig,
    layer_id: u64,
) -> Result<Var> {
    conformer_block_traced(ctx, prefix, x, cfg, layer_id, None)
}

pub fn conformer_block_traced<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    x: Var,
    cfg: &ConformerConfig,
    layer_id: u64,
    probs: Option<&mut AttentionProbs>,
) -> Result<Var> {
    let base = layer_id * 16;
    let f1 = ffn(ctx, &format!("{prefix}.ffn1"), x, cfg.dropout, base)?;
    let f1 = ctx.g.scale(f1, 0.5);
    let h = ctx.g.add(x, f1)?;
    let att = mhsa(ctx, &format!("{prefix}.mhsa"), h, cfg, base + 2, probs)?;
    let h = ctx.g.add(h, att)?;
    let conv = conv_module(ctx, &format!("{prefix}.conv"), h, cfg, base + 3)?;
    let h = ctx.g.add(h, conv)?;
    let f2 = ffn(ctx, &format!("{prefix}.ffn2"), h, cfg.dropout, base + 4)?;
    let f2 = ctx.g.scale(f2, 0.5);
    let h = ctx.g.add(h, f2)?;
    ctx.layer_norm(&format!("{prefix}.ln_out"), h)
}

/// Concatenates `factor` consecutive frames along the feature dim, zero
/// padding the tail: `[T x d] -> [ceil(T/factor) x factor·d]`.
pub fn time_stack<S: Scalar>(ctx: &mut Ctx<S>, x: Var, factor: usize) -> Result<Var> {
    if factor == 0 {
        return Err(Error::config("time_stack factor must be >= 1"));
    }
    if factor == 1 {
        return Ok(x);
    }
    let (t, d) = (ctx.g.shape(x)[0], ctx.g.shape(x)[1]);
    let out_t = t.div_ceil(factor);
    let padded = ctx.g.pad_rows(x, out_t * factor)?;
    ctx.g.reshape(padded, &[out_t, factor * d])
}

pub struct EncoderOutput {
    pub output: Var,
    /// Output of each conformer layer (`hⁱ`), in order.
    pub taps: Vec<Var>,
}

/// Full encoder pass over `features: [T x input_dim]`.
pub fn encoder_forward<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &ConformerConfig,
    features: Var,
    hooks: &HookSet<S>,
) -> Result<EncoderOutput> {
    hooks.validate(cfg)?;
    let shape = ctx.g.shape(features).to_vec();
    if shape.len() != 2 || shape[1] != cfg.input_dim {
        return Err(Error::shape("encoder_forward", &shape, &[0, cfg.input_dim]));
    }
    let x = hooks.run(ctx, InsertionPoint::Input, features, None)?;
    let mut h = ctx.linear("encoder.input_proj", x)?;
    let [n1, n2, _] = cfg.block_layout;
    let mut taps: Vec<Var> = Vec::with_capacity(cfg.num_layers());
    for i in 0..cfg.num_layers() {
        if i > 0 {
            if i == n1 {
                h = time_stack(ctx, h, cfg.time_stack_factor)?;
            }
            if i == n1 + n2 {
                h = ctx.linear("encoder.stack_proj", h)?;
            }
            let prev = (i >= 2)
                .then(|| taps[i - 2])
                .filter(|&p| ctx.g.shape(p) == ctx.g.shape(h));
            h = hooks.run(ctx, InsertionPoint::Boundary(i), h, prev)?;
        }
        h = conformer_block_forward(ctx, &layer_prefix(i), h, cfg, i as u64)?;
        taps.push(h);
    }
    if ctx.has(&format!("{EXTRA_LAYER_PREFIX}.ln_out.gamma")) {
        h = conformer_block_forward(ctx, EXTRA_LAYER_PREFIX, h, cfg, cfg.num_layers() as u64)?;
    }
    Ok(EncoderOutput { output: h, taps })
}
