//! Input and latent reprogramming: `R(x) = x + w + H(x)` applied before the
//! frozen encoder and between its layers, with an optional bridge that feeds
//! the previous layer's output into `R`.
//!
//! `H` is a bottleneck around a small core: `H(x) = Up(core(Down x))`. `Up`
//! starts at zero, so a fresh module is the identity. Two cores exist: a
//! frame-attention mask over a 2-D convolution (CAR1) and a lightweight
//! grouped 1-D convolution with softmax-normalized taps (CAR2).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformer::{materialize, ConformerConfig, EncoderHook, Init, InsertionPoint, ParamSpec};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore, Role};
use crate::peft::AdaptationScheme;
use crate::tensor::{Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Attention,
    Conv,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReprogramConfig {
    pub bottleneck: usize,
    pub conv_groups: usize,
    pub conv_kernel: usize,
    pub attention_kernel: usize,
}

impl Default for ReprogramConfig {
    fn default() -> Self {
        // 9 groups x 5 taps = 45 = 36 + 3x3: both cores cost the same
        ReprogramConfig {
            bottleneck: 36,
            conv_groups: 9,
            conv_kernel: 5,
            attention_kernel: 3,
        }
    }
}

impl ReprogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck == 0 {
            return Err(Error::config("reprogram bottleneck must be >= 1"));
        }
        if self.conv_groups == 0 || !self.bottleneck.is_multiple_of(self.conv_groups) {
            return Err(Error::config(format!(
                "bottleneck {} not divisible by {} conv groups",
                self.bottleneck, self.conv_groups
            )));
        }
        if self.conv_kernel.is_multiple_of(2) || self.attention_kernel.is_multiple_of(2) {
            return Err(Error::config("reprogram kernels must be odd"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeConfig {
    pub beta_hat: f64,
    /// Boundaries carrying a latent module; empty means every boundary.
    pub insertion_points: Vec<InsertionPoint>,
    /// One module per width instead of one per insertion point.
    pub share_weights: bool,
    /// Apply seeded dropout at rate `beta_hat` to `h_prev` instead of scaling.
    pub dropout_mode: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        BridgeConfig {
            beta_hat: 0.15,
            insertion_points: Vec::new(),
            share_weights: false,
            dropout_mode: false,
        }
    }
}

impl BridgeConfig {
    pub fn validate(&self, cfg: &ConformerConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta_hat) {
            return Err(Error::config(format!("beta_hat {} outside [0, 1]", self.beta_hat)));
        }
        if self.dropout_mode && self.beta_hat >= 1.0 {
            return Err(Error::config("dropout-mode bridge needs beta_hat < 1"));
        }
        for &p in &self.insertion_points {
            if p == InsertionPoint::Input || !cfg.has_point(p) {
                return Err(Error::config(format!("no latent insertion point {p:?}")));
            }
        }
        Ok(())
    }

    pub fn points(&self, cfg: &ConformerConfig) -> Vec<InsertionPoint> {
        if self.insertion_points.is_empty() {
            (1..cfg.num_layers()).map(InsertionPoint::Boundary).collect()
        } else {
            self.insertion_points.clone()
        }
    }
}

/// Which reprogramming modules a scheme inserts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprogramPlan {
    pub extractor: ExtractorKind,
    pub input: bool,
    pub latent: bool,
    pub bridged: bool,
    pub bridge: BridgeConfig,
}

/// Handle to one `R_θ`; its parameters live in the store under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprogramModule {
    pub prefix: String,
    pub width: usize,
    pub kind: ExtractorKind,
    pub cfg: ReprogramConfig,
}

pub const REPROGRAM_PREFIX: &str = "reprogram";

fn module_spec(m: &ReprogramModule) -> ParamSpec {
    let (p, f, r) = (&m.prefix, m.width, m.cfg.bottleneck);
    let mut s = ParamSpec::new();
    let rp = Role::Reprogram;
    s.push((format!("{p}.w"), vec![f], rp, Init::Zeros));
    if m.kind == ExtractorKind::None {
        return s;
    }
    s.push((format!("{p}.down.w"), vec![f, r], rp, Init::Xavier(f, r)));
    s.push((format!("{p}.down.b"), vec![r], rp, Init::Zeros));
    match m.kind {
        ExtractorKind::Attention => {
            let k = m.cfg.attention_kernel;
            s.push((format!("{p}.att.score"), vec![r, 1], rp, Init::Xavier(r, 1)));
            s.push((format!("{p}.att.kernel"), vec![k, k], rp, Init::Zeros));
        }
        ExtractorKind::Conv => {
            let (k, g) = (m.cfg.conv_kernel, m.cfg.conv_groups);
            s.push((format!("{p}.lconv.logits"), vec![k, g], rp, Init::Zeros));
        }
        ExtractorKind::None => unreachable!(),
    }
    s.push((format!("{p}.up.w"), vec![r, f], rp, Init::Zeros));
    s.push((format!("{p}.up.b"), vec![f], rp, Init::Zeros));
    s
}

impl ReprogramModule {
    pub fn new(prefix: impl Into<String>, width: usize, kind: ExtractorKind, cfg: &ReprogramConfig) -> Self {
        ReprogramModule {
            prefix: prefix.into(),
            width,
            kind,
            cfg: cfg.clone(),
        }
    }

    pub fn param_count(&self) -> usize {
        module_spec(self).iter().map(|(_, s, _, _)| s.iter().product::<usize>()).sum()
    }

    /// Adds the module's parameters: `w`, `Down`, `Up` zero-valued except the
    /// `Down` projection and scorer, conv kernel a centered delta.
    pub fn init<S: Scalar>(&self, store: &mut ParamStore<S>, rng: &mut ChaCha8Rng) {
        materialize(store, module_spec(self), rng);
        if self.kind == ExtractorKind::Attention {
            let k = self.cfg.attention_kernel;
            let kernel = store
                .get_mut(&format!("{}.att.kernel", self.prefix))
                .expect("just inserted");
            kernel.value.data_mut()[(k / 2) * k + k / 2] = S::one();
        }
    }

    /// `R(x) = x + w + H(x)`.
    pub fn apply<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let w = ctx.p(&format!("{}.w", self.prefix))?;
        let shifted = ctx.g.add_bias(x, w)?;
        if self.kind == ExtractorKind::None {
            return Ok(shifted);
        }
        let h = self.extract(ctx, x)?;
        if ctx.g.shape(h) != ctx.g.shape(x) {
            return Err(Error::contract(format!(
                "extractor output {:?} does not match input {:?}",
                ctx.g.shape(h),
                ctx.g.shape(x)
            )));
        }
        ctx.g.add(shifted, h)
    }

    /// `H(x) = Up(core(Down x))`.
    pub fn extract<S: Scalar>(&self, ctx: &mut Ctx<S>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let z = ctx.linear(&format!("{p}.down"), x)?;
        let z = match self.kind {
            ExtractorKind::Attention => extractor_attention(ctx, p, z)?,
            ExtractorKind::Conv => extractor_conv(ctx, p, z, self.cfg.conv_groups)?,
            ExtractorKind::None => return Err(Error::contract("module has no extractor")),
        };
        ctx.linear(&format!("{p}.up"), z)
    }
}

/// Lightweight convolution over time: `{prefix}.lconv.logits: [K x G]` are
/// softmax-normalized over the K taps and shared by the channels of each of
/// G contiguous groups.
pub fn extractor_conv<S: Scalar>(ctx: &mut Ctx<S>, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    let c = ctx.g.shape(x)[1];
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::config(format!("{c} channels not divisible by {groups} groups")));
    }
    let logits = ctx.p(&format!("{prefix}.lconv.logits"))?;
    let k = ctx.g.shape(logits)[0];
    let w = lconv_weights(ctx, logits)?;
    let per = c / groups;
    let idx: Vec<usize> = (0..k * c).map(|i| (i / c) * groups + (i % c) / per).collect();
    let full = ctx.g.gather(w, &idx, &[k, c])?;
    ctx.g.depthwise_conv1d(x, full)
}

/// Tap weights `[K x G]`, each column a distribution over taps.
pub fn lconv_weights<S: Scalar>(ctx: &mut Ctx<S>, logits: Var) -> Result<Var> {
    let t = ctx.g.transpose(logits)?;
    let p = ctx.g.softmax(t);
    ctx.g.transpose(p)
}

/// Frame attention over a 2-D convolution: `a = softmax_t(x·s)`,
/// `y = T · a ⊙ conv2d(x, kernel)`.
pub fn extractor_attention<S: Scalar>(ctx: &mut Ctx<S>, prefix: &str, x: Var) -> Result<Var> {
    let a = attention_mask(ctx, prefix, x)?;
    let t = ctx.g.shape(x)[0];
    let kernel = ctx.p(&format!("{prefix}.att.kernel"))?;
    let y = ctx.g.conv2d(x, kernel)?;
    let y = ctx.g.scale_rows(y, a)?;
    Ok(ctx.g.scale(y, t as f64))
}

/// Per-frame attention mass `[1 x T]`, summing to 1.
pub fn attention_mask<S: Scalar>(ctx: &mut Ctx<S>, prefix: &str, x: Var) -> Result<Var> {
    let score = ctx.p(&format!("{prefix}.att.score"))?;
    let s = ctx.g.matmul(x, score)?;
    let s = ctx.g.transpose(s)?;
    Ok(ctx.g.softmax(s))
}

/// `R(x)` on raw features.
pub fn input_reprogram<S: Scalar>(ctx: &mut Ctx<S>, module: &ReprogramModule, x: Var) -> Result<Var> {
    let f = ctx.g.shape(x)[1];
    if f != module.width {
        return Err(Error::shape("input_reprogram", ctx.g.shape(x), &[0, module.width]));
    }
    module.apply(ctx, x)
}

/// `R(h)`, or `R(h + β̂·h_prev)` when bridged and `h_prev` is present.
pub fn latent_reprogram<S: Scalar>(
    ctx: &mut Ctx<S>,
    module: &ReprogramModule,
    h: Var,
    h_prev: Option<Var>,
    bridge: Option<&BridgeConfig>,
    layer_id: u64,
) -> Result<Var> {
    let arg = match (bridge, h_prev) {
        (Some(b), Some(prev)) if ctx.g.shape(prev) == ctx.g.shape(h) => {
            let scaled = if b.dropout_mode {
                ctx.dropout(prev, b.beta_hat, BRIDGE_DROPOUT_LAYER + layer_id)?
            } else {
                ctx.g.scale(prev, b.beta_hat)
            };
            ctx.g.add(h, scaled)?
        }
        _ => h,
    };
    module.apply(ctx, arg)
}

const BRIDGE_DROPOUT_LAYER: u64 = 1 << 20;

pub struct ReprogramHook {
    pub point: InsertionPoint,
    pub module: ReprogramModule,
    pub bridge: Option<BridgeConfig>,
}

impl<S: Scalar> EncoderHook<S> for ReprogramHook {
    fn point(&self) -> InsertionPoint {
        self.point
    }

    fn apply(&self, ctx: &mut Ctx<S>, h: Var, h_prev: Option<Var>) -> Result<Var> {
        match self.point {
            InsertionPoint::Input => input_reprogram(ctx, &self.module, h),
            InsertionPoint::Boundary(i) => latent_reprogram(ctx, &self.module, h, h_prev, self.bridge.as_ref(), i as u64),
        }
    }
}

/// Modules a plan inserts, in insertion order.
pub fn plan_hooks(plan: &ReprogramPlan, enc: &ConformerConfig, rcfg: &ReprogramConfig) -> Vec<ReprogramHook> {
    let mut hooks = Vec::new();
    if plan.input {
        hooks.push(ReprogramHook {
            point: InsertionPoint::Input,
            module: ReprogramModule::new(format!("{REPROGRAM_PREFIX}.input"), enc.input_dim, plan.extractor, rcfg),
            bridge: None,
        });
    }
    if plan.latent {
        for point in plan.bridge.points(enc) {
            let width = enc.point_dim(point);
            let prefix = if plan.bridge.share_weights {
                format!("{REPROGRAM_PREFIX}.shared{width}")
            } else {
                format!("{REPROGRAM_PREFIX}.{}", point.tag())
            };
            hooks.push(ReprogramHook {
                point,
                module: ReprogramModule::new(prefix, width, plan.extractor, rcfg),
                bridge: plan.bridged.then(|| plan.bridge.clone()),
            });
        }
    }
    hooks
}

/// Inserts the parameters of every module in `plan` (shared modules once).
pub fn init_plan<S: Scalar>(
    store: &mut ParamStore<S>,
    plan: &ReprogramPlan,
    enc: &ConformerConfig,
    rcfg: &ReprogramConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    rcfg.validate()?;
    plan.bridge.validate(enc)?;
    for hook in plan_hooks(plan, enc, rcfg) {
        if !store.contains(&format!("{}.w", hook.module.prefix)) {
            hook.module.init(store, rng);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CarVariant {
    Car1,
    Car2,
    Car3,
}

impl std::str::FromStr for CarVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "car1" => Ok(CarVariant::Car1),
            "car2" => Ok(CarVariant::Car2),
            "car3" => Ok(CarVariant::Car3),
            other => Err(Error::config(format!("unknown reprogramming variant `{other}`"))),
        }
    }
}

/// Input plus latent reprogramming at every boundary, backbone frozen.
/// CAR1 uses the attention extractor, CAR2 the conv extractor, CAR3 is CAR1
/// with bridged connections.
pub fn car_plan(variant: CarVariant) -> ReprogramPlan {
    ReprogramPlan {
        extractor: if variant == CarVariant::Car2 {
            ExtractorKind::Conv
        } else {
            ExtractorKind::Attention
        },
        input: true,
        latent: true,
        bridged: variant == CarVariant::Car3,
        bridge: BridgeConfig::default(),
    }
}

pub fn build_car_scheme(variant: CarVariant, cfg: &ConformerConfig) -> Result<AdaptationScheme> {
    cfg.validate()?;
    Ok(AdaptationScheme::car(variant))
}
