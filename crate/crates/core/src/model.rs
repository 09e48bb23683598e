//! The full transducer: encoder with scheme hooks, optional self-supervised
//! stacks, predictor and joint.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformer::{encoder_forward, init_encoder, ConformerConfig, HookSet};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore};
use crate::peft::{adapter_hooks, AdaptationScheme};
use crate::reprogram::{plan_hooks, ReprogramConfig};
use crate::ssl::{has_ssl, init_ssl, ssl_forward, SslConfig, SslTerms};
use crate::tensor::{Scalar, Tensor, Var};
use crate::transducer::{
    greedy_decode, init_decoder, joint_logits, predictor_forward, rnnt_loss, Transcript, TransducerConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: ConformerConfig,
    pub transducer: TransducerConfig,
    pub reprogram: ReprogramConfig,
    pub adapter_bottleneck: usize,
    pub ssl: SslConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: ConformerConfig::default(),
            transducer: TransducerConfig::default(),
            reprogram: ReprogramConfig::default(),
            adapter_bottleneck: 36,
            ssl: SslConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Small preset for fast single-core experiments.
    pub fn toy() -> Self {
        ModelConfig {
            encoder: ConformerConfig {
                model_dim: 32,
                num_heads: 2,
                conv_kernel_size: 5,
                ffn_expansion: 2,
                block_layout: [1, 1, 3],
                rel_pos_max_distance: 6,
                ..ConformerConfig::default()
            },
            transducer: TransducerConfig {
                pred_dim: 32,
                joint_dim: 32,
                ..TransducerConfig::default()
            },
            reprogram: ReprogramConfig::default(),
            adapter_bottleneck: 36,
            ssl: SslConfig {
                codebook_size: 32,
                contrastive_layers: 1,
                mlm_layers: 1,
                ..SslConfig::default()
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "desk" => Ok(Self::default()),
            other => Err(Error::config(format!("unknown model preset `{other}` (toy, desk)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.transducer.validate()?;
        self.reprogram.validate()?;
        self.ssl.validate()
    }
}

/// Freshly initialized pretrainable model, optionally with the
/// self-supervised stacks.
pub fn init_backbone(cfg: &ModelConfig, with_ssl: bool, seed: u64) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_encoder(&mut store, &cfg.encoder, &mut rng);
    init_decoder(&mut store, &cfg.transducer, cfg.encoder.model_dim, &mut rng);
    if with_ssl {
        init_ssl(&mut store, &cfg.encoder, &cfg.ssl, &mut rng);
    }
    store
}

pub fn build_hooks<S: Scalar>(cfg: &ModelConfig, scheme: &AdaptationScheme) -> HookSet<'static, S> {
    let mut hooks = HookSet::new();
    if let Some(plan) = &scheme.reprogram {
        for h in plan_hooks(plan, &cfg.encoder, &cfg.reprogram) {
            hooks.register(h);
        }
    }
    if scheme.adapters {
        for h in adapter_hooks(&cfg.encoder) {
            hooks.register(h);
        }
    }
    hooks
}

pub struct Encoded {
    pub output: Var,
    pub ssl: Option<SslTerms<Var>>,
}

/// Encoder plus the self-supervised stacks when the store has them. The
/// self-supervised losses are built only when `ssl_losses` is set.
pub fn encode<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &ModelConfig,
    hooks: &HookSet<S>,
    features: Var,
    ssl_losses: bool,
    seed: u64,
) -> Result<Encoded> {
    let enc = encoder_forward(ctx, &cfg.encoder, features, hooks)?;
    if !has_ssl(ctx.store()) {
        if ssl_losses {
            return Err(Error::config("self-supervised losses requested on a model without them"));
        }
        return Ok(Encoded {
            output: enc.output,
            ssl: None,
        });
    }
    let out = ssl_forward(ctx, &cfg.encoder, &cfg.ssl, enc.output, ssl_losses, seed)?;
    Ok(Encoded {
        output: out.output,
        ssl: out.terms,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rnnt: f64,
    pub ssl: Option<SslTerms<f64>>,
}

/// Training loss of one utterance. The self-supervised terms join when the
/// scheme asks for them and `ctx.train` is set.
pub fn utterance_loss<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &ModelConfig,
    scheme: &AdaptationScheme,
    hooks: &HookSet<S>,
    features: &Tensor<S>,
    labels: &Transcript,
    seed: u64,
) -> Result<(Var, LossBreakdown)> {
    let x = ctx.g.constant(features.clone());
    let with_ssl = scheme.ssl && ctx.train;
    let enc = encode(ctx, cfg, hooks, x, with_ssl, seed)?;
    let pred = predictor_forward(ctx, &cfg.transducer, labels)?;
    let lattice = joint_logits(ctx, enc.output, pred)?;
    let rnnt = rnnt_loss(&mut ctx.g, &lattice, labels)?;
    let rnnt_v = ctx.g.value(rnnt).item().as_f64();
    match enc.ssl {
        Some(t) => {
            let total = crate::ssl::just_total(&mut ctx.g, rnnt, t.contrastive, t.mlm, t.diversity, &cfg.ssl)?;
            let v = |g: &crate::tensor::Graph<S>, x: Var| g.value(x).item().as_f64();
            let terms = SslTerms {
                contrastive: v(&ctx.g, t.contrastive),
                mlm: v(&ctx.g, t.mlm),
                diversity: v(&ctx.g, t.diversity),
            };
            let total_v = v(&ctx.g, total);
            Ok((
                total,
                LossBreakdown {
                    total: total_v,
                    rnnt: rnnt_v,
                    ssl: Some(terms),
                },
            ))
        }
        None => Ok((
            rnnt,
            LossBreakdown {
                total: rnnt_v,
                rnnt: rnnt_v,
                ssl: None,
            },
        )),
    }
}

/// Greedy transcription of one utterance.
pub fn transcribe<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    hooks: &HookSet<S>,
    features: &Tensor<S>,
) -> Result<Transcript> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.g.constant(features.clone());
    let enc = encode(&mut ctx, cfg, hooks, x, false, 0)?;
    greedy_decode(&mut ctx, &cfg.transducer, enc.output)
}

/// Encoder output (after any self-supervised stacks) without hooks' losses.
pub fn encoder_output<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &ModelConfig,
    hooks: &HookSet<S>,
    features: &Tensor<S>,
) -> Result<Tensor<S>> {
    let mut ctx = Ctx::new(store, false);
    let x = ctx.g.constant(features.clone());
    let enc = encode(&mut ctx, cfg, hooks, x, false, 0)?;
    Ok(ctx.g.value(enc.output).clone())
}
