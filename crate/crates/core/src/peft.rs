//! Baseline adaptation schemes: residual adapters, bias-only tuning, layer
//! freezing, output-head policies and the JUST variants, plus exact
//! parameter accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformer::{
    init_extra_layer, layer_prefix, materialize, ConformerConfig, EncoderHook, Init, InsertionPoint, ParamSpec,
    EXTRA_LAYER_PREFIX,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Ctx, ParamStore, Role};
use crate::reprogram::{car_plan, init_plan, CarVariant, ReprogramPlan};
use crate::tensor::{Scalar, Var};
use crate::transducer::{init_probe, reinit_head};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchemeId {
    B0,
    F0,
    F0a,
    F0b,
    F1,
    F1a,
    F1b,
    F2,
    F3,
    F4,
    F5,
    Car1,
    Car2,
    Car3,
    M0,
    M1,
    M2,
    J0,
    J1,
    J2,
    J3,
    J4,
}

impl SchemeId {
    pub const ALL: [SchemeId; 22] = [
        SchemeId::B0,
        SchemeId::F0,
        SchemeId::F0a,
        SchemeId::F0b,
        SchemeId::F1,
        SchemeId::F1a,
        SchemeId::F1b,
        SchemeId::F2,
        SchemeId::F3,
        SchemeId::F4,
        SchemeId::F5,
        SchemeId::Car1,
        SchemeId::Car2,
        SchemeId::Car3,
        SchemeId::M0,
        SchemeId::M1,
        SchemeId::M2,
        SchemeId::J0,
        SchemeId::J1,
        SchemeId::J2,
        SchemeId::J3,
        SchemeId::J4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeId::B0 => "B0",
            SchemeId::F0 => "F0",
            SchemeId::F0a => "F0a",
            SchemeId::F0b => "F0b",
            SchemeId::F1 => "F1",
            SchemeId::F1a => "F1a",
            SchemeId::F1b => "F1b",
            SchemeId::F2 => "F2",
            SchemeId::F3 => "F3",
            SchemeId::F4 => "F4",
            SchemeId::F5 => "F5",
            SchemeId::Car1 => "CAR1",
            SchemeId::Car2 => "CAR2",
            SchemeId::Car3 => "CAR3",
            SchemeId::M0 => "M0",
            SchemeId::M1 => "M1",
            SchemeId::M2 => "M2",
            SchemeId::J0 => "J0",
            SchemeId::J1 => "J1",
            SchemeId::J2 => "J2",
            SchemeId::J3 => "J3",
            SchemeId::J4 => "J4",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<SchemeId> for String {
    fn from(id: SchemeId) -> String {
        id.as_str().to_string()
    }
}

impl TryFrom<String> for SchemeId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for SchemeId {
    type Err = Error;

    /// Ids as listed (`F0a`, `CAR3`, ...); `car1`..`car3` also accepted.
    fn from_str(s: &str) -> Result<Self> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.as_str() == s || (id.as_str().starts_with("CAR") && id.as_str().eq_ignore_ascii_case(s)))
            .ok_or_else(|| Error::config(format!("unknown scheme `{s}`")))
    }
}

/// What happens to the pretrained output head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPolicy {
    Load,
    /// Fresh random head, trained.
    Reinit,
    /// Identity-initialized dense layer appended after the loaded head.
    Probe,
}

/// Which existing parameter groups train.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSet {
    pub all: bool,
    pub last_layer: bool,
    pub extra_layer: bool,
    pub decoder: bool,
    pub bias: bool,
    /// Inserted reprogram/adapter modules.
    pub modules: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationScheme {
    pub id: SchemeId,
    pub train: TrainSet,
    pub reprogram: Option<ReprogramPlan>,
    pub adapters: bool,
    pub extra_layer: bool,
    pub head: HeadPolicy,
    /// Add the self-supervised losses to the transducer loss.
    pub ssl: bool,
}

impl AdaptationScheme {
    fn base(id: SchemeId) -> Self {
        AdaptationScheme {
            id,
            train: TrainSet::default(),
            reprogram: None,
            adapters: false,
            extra_layer: false,
            head: HeadPolicy::Load,
            ssl: false,
        }
    }

    pub fn car(variant: CarVariant) -> Self {
        let id = match variant {
            CarVariant::Car1 => SchemeId::Car1,
            CarVariant::Car2 => SchemeId::Car2,
            CarVariant::Car3 => SchemeId::Car3,
        };
        let mut s = Self::base(id);
        s.reprogram = Some(car_plan(variant));
        s.train.modules = true;
        s
    }

    pub fn from_id(id: SchemeId) -> Self {
        use SchemeId::*;
        let mut s = match id {
            Car1 => return Self::car(CarVariant::Car1),
            Car2 => return Self::car(CarVariant::Car2),
            Car3 | M2 => Self::car(CarVariant::Car3),
            J1 | J2 => Self::car(CarVariant::Car3),
            _ => Self::base(id),
        };
        s.id = id;
        match id {
            B0 => {}
            F0 | M0 | J0 | J1 => s.train.all = true,
            F0a => {
                s.train.all = true;
                s.head = HeadPolicy::Reinit;
            }
            F0b => {
                s.train.all = true;
                s.head = HeadPolicy::Probe;
            }
            F1 => s.train.last_layer = true,
            F1a => {
                s.train.last_layer = true;
                s.head = HeadPolicy::Reinit;
            }
            F1b => {
                s.train.last_layer = true;
                s.head = HeadPolicy::Probe;
            }
            F2 => {
                s.extra_layer = true;
                s.train.extra_layer = true;
            }
            F3 | M1 => {
                s.adapters = true;
                s.train.modules = true;
            }
            F4 | J4 => s.train.decoder = true,
            F5 => s.train.bias = true,
            J2 => s.train.decoder = true,
            J3 => {
                s.adapters = true;
                s.train.modules = true;
                s.train.decoder = true;
            }
            Car1 | Car2 | Car3 | M2 => {}
        }
        s.ssl = matches!(id, J0 | J1 | J2 | J3 | J4);
        s
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(Self::from_id(s.parse()?))
    }

    /// True when no original backbone parameter trains.
    pub fn backbone_frozen(&self) -> bool {
        let t = &self.train;
        !(t.all || t.last_layer || t.decoder || t.bias)
    }
}

/// Coarse owner of a parameter, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    EncoderLayer(usize),
    EncoderOther,
    ExtraLayer,
    Predictor,
    Joint,
    Head,
    Probe,
    Reprogram,
    Adapter,
    Ssl,
}

impl ModuleKind {
    pub fn of(name: &str) -> Result<ModuleKind> {
        let after = |p: &str| name.strip_prefix(p).filter(|r| r.starts_with('.'));
        if let Some(rest) = name.strip_prefix("encoder.layers.") {
            let idx = rest.split('.').next().and_then(|s| s.parse().ok());
            return idx
                .map(ModuleKind::EncoderLayer)
                .ok_or_else(|| Error::config(format!("malformed encoder layer name `{name}`")));
        }
        let kind = if after(EXTRA_LAYER_PREFIX).is_some() {
            ModuleKind::ExtraLayer
        } else if after("encoder.input_proj").is_some() || after("encoder.stack_proj").is_some() {
            ModuleKind::EncoderOther
        } else if after("predictor").is_some() {
            ModuleKind::Predictor
        } else if after("joint.out").is_some() {
            ModuleKind::Head
        } else if after("joint").is_some() {
            ModuleKind::Joint
        } else if after("probe").is_some() {
            ModuleKind::Probe
        } else if after("reprogram").is_some() {
            ModuleKind::Reprogram
        } else if after("adapter").is_some() {
            ModuleKind::Adapter
        } else if after("ssl").is_some() {
            ModuleKind::Ssl
        } else {
            return Err(Error::config(format!("parameter `{name}` belongs to no known module")));
        };
        Ok(kind)
    }

    /// Reporting bucket.
    pub fn group(self) -> &'static str {
        match self {
            ModuleKind::EncoderLayer(_) | ModuleKind::EncoderOther => "encoder",
            ModuleKind::ExtraLayer => "extra",
            ModuleKind::Predictor => "predictor",
            ModuleKind::Joint => "joint",
            ModuleKind::Head => "head",
            ModuleKind::Probe => "probe",
            ModuleKind::Reprogram => "reprogram",
            ModuleKind::Adapter => "adapter",
            ModuleKind::Ssl => "ssl",
        }
    }

    /// Part of the pretrained model rather than added by a scheme.
    pub fn is_backbone(self) -> bool {
        !matches!(
            self,
            ModuleKind::ExtraLayer | ModuleKind::Probe | ModuleKind::Reprogram | ModuleKind::Adapter
        )
    }
}

/// Whether parameter `name` trains under `scheme`. Unknown names are errors.
pub fn is_trainable(scheme: &AdaptationScheme, name: &str, role: Role, num_layers: usize) -> Result<bool> {
    let t = &scheme.train;
    let kind = ModuleKind::of(name)?;
    if t.all || (t.bias && role == Role::Bias) {
        return Ok(true);
    }
    Ok(match kind {
        ModuleKind::EncoderLayer(i) => t.last_layer && i + 1 == num_layers,
        ModuleKind::ExtraLayer => t.extra_layer,
        ModuleKind::Predictor | ModuleKind::Joint => t.decoder,
        ModuleKind::Head => t.decoder,
        ModuleKind::Probe => scheme.head == HeadPolicy::Probe,
        ModuleKind::Reprogram | ModuleKind::Adapter => t.modules,
        ModuleKind::EncoderOther | ModuleKind::Ssl => false,
    })
}

pub const ADAPTER_PREFIX: &str = "adapter";

pub(crate) fn adapter_spec(prefix: &str, dim: usize, bottleneck: usize) -> ParamSpec {
    let a = Role::Adapter;
    vec![
        (format!("{prefix}.ln.gamma"), vec![dim], a, Init::Ones),
        (format!("{prefix}.ln.beta"), vec![dim], a, Init::Zeros),
        (format!("{prefix}.down.w"), vec![dim, bottleneck], a, Init::Xavier(dim, bottleneck)),
        (format!("{prefix}.down.b"), vec![bottleneck], a, Init::Zeros),
        (format!("{prefix}.up.w"), vec![bottleneck, dim], a, Init::Zeros),
        (format!("{prefix}.up.b"), vec![dim], a, Init::Zeros),
    ]
}

pub fn adapter_param_count(dim: usize, bottleneck: usize) -> usize {
    2 * dim + dim * bottleneck + bottleneck + bottleneck * dim + dim
}

/// `h + Up(swish(Down(layer_norm(h))))`.
pub fn adapter_forward<S: Scalar>(ctx: &mut Ctx<S>, prefix: &str, h: Var) -> Result<Var> {
    let z = ctx.layer_norm(&format!("{prefix}.ln"), h)?;
    let z = ctx.linear(&format!("{prefix}.down"), z)?;
    let z = ctx.g.swish(z);
    let z = ctx.linear(&format!("{prefix}.up"), z)?;
    ctx.g.add(h, z)
}

pub struct AdapterHook {
    pub point: InsertionPoint,
    pub prefix: String,
}

impl<S: Scalar> EncoderHook<S> for AdapterHook {
    fn point(&self) -> InsertionPoint {
        self.point
    }

    fn apply(&self, ctx: &mut Ctx<S>, h: Var, _h_prev: Option<Var>) -> Result<Var> {
        adapter_forward(ctx, &self.prefix, h)
    }
}

/// Adapters sit at the input and every layer boundary, like reprogramming.
pub fn adapter_hooks(enc: &ConformerConfig) -> Vec<AdapterHook> {
    enc.insertion_points()
        .into_iter()
        .map(|point| AdapterHook {
            point,
            prefix: format!("{ADAPTER_PREFIX}.{}", point.tag()),
        })
        .collect()
}

/// Inserts the scheme's modules into a copy of `store` and sets every
/// parameter's trainable flag.
pub fn apply_freezing_scheme<S: Scalar>(
    store: &ParamStore<S>,
    scheme: &AdaptationScheme,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<ParamStore<S>> {
    let mut out = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ada9);
    let enc = &cfg.encoder;
    if scheme.ssl && !crate::ssl::has_ssl(store) {
        return Err(Error::config(format!(
            "scheme {} needs a backbone pretrained with self-supervised losses (pretrain --ssl)",
            scheme.id
        )));
    }
    if let Some(plan) = &scheme.reprogram {
        init_plan(&mut out, plan, enc, &cfg.reprogram, &mut rng)?;
    }
    if scheme.adapters {
        if cfg.adapter_bottleneck == 0 {
            return Err(Error::config("adapter bottleneck must be >= 1"));
        }
        for hook in adapter_hooks(enc) {
            let spec = adapter_spec(&hook.prefix, enc.point_dim(hook.point), cfg.adapter_bottleneck);
            materialize(&mut out, spec, &mut rng);
        }
    }
    if scheme.extra_layer {
        init_extra_layer(&mut out, enc, &mut rng);
    }
    match scheme.head {
        HeadPolicy::Load => {}
        HeadPolicy::Reinit => reinit_head(&mut out, &cfg.transducer, &mut rng),
        HeadPolicy::Probe => init_probe(&mut out, &cfg.transducer),
    }
    let layers = enc.num_layers();
    let flags: Vec<(String, bool)> = out
        .iter()
        .map(|(n, p)| is_trainable(scheme, n, p.role, layers).map(|t| (n.to_string(), t)))
        .collect::<Result<_>>()?;
    for (name, t) in flags {
        out.get_mut(&name).expect("listed").trainable = t;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Count {
    pub total: usize,
    pub trainable: usize,
}

impl Count {
    fn add(&mut self, n: usize, trainable: bool) {
        self.total += n;
        if trainable {
            self.trainable += n;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub total_params: usize,
    pub trainable_params: usize,
    /// Parameters of the pretrained model, excluding scheme-added modules.
    pub backbone_params: usize,
    pub by_role: BTreeMap<String, Count>,
    pub by_module: BTreeMap<String, Count>,
}

impl BudgetReport {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable_params as f64 / self.total_params.max(1) as f64
    }

    /// Trainable parameters relative to the pretrained backbone size.
    pub fn trainable_over_backbone(&self) -> f64 {
        self.trainable_params as f64 / self.backbone_params.max(1) as f64
    }

    /// Share of all parameters held by each module; sums to 1.
    pub fn module_shares(&self) -> BTreeMap<String, f64> {
        let total = self.total_params.max(1) as f64;
        self.by_module
            .iter()
            .map(|(k, c)| (k.clone(), c.total as f64 / total))
            .collect()
    }
}

/// Exact counts by role and module of an already-flagged store.
pub fn count_params<S: Scalar>(store: &ParamStore<S>) -> Result<BudgetReport> {
    let mut r = BudgetReport::default();
    for (name, p) in store.iter() {
        let n = p.value.len();
        let kind = ModuleKind::of(name)?;
        r.total_params += n;
        if p.trainable {
            r.trainable_params += n;
        }
        if kind.is_backbone() {
            r.backbone_params += n;
        }
        r.by_role.entry(p.role.name().to_string()).or_default().add(n, p.trainable);
        r.by_module.entry(kind.group().to_string()).or_default().add(n, p.trainable);
    }
    Ok(r)
}

/// Name of the last conformer layer, which F1 tunes.
pub fn last_layer_prefix(enc: &ConformerConfig) -> String {
    layer_prefix(enc.num_layers() - 1)
}
