use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adam_step, AdamConfig, AdamState, Schedule};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::model::{build_hooks, utterance_loss, ModelConfig};
use crate::params::{Ctx, GradStore, ParamStore};
use crate::peft::AdaptationScheme;
use crate::tensor::counter_rng::mix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub schedule: Schedule,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            schedule: Schedule::Constant,
            batch_size: 4,
            steps: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.adam.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    /// Mean batch loss per step.
    pub trace: Vec<f64>,
}

/// Deterministic minibatch order: reshuffled every epoch from the seed.
fn batch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[seed, 0xE90C, epoch])));
    idx
}

/// Runs `cfg.steps` Adam steps of `scheme` on `store`, which must already
/// carry the scheme's modules and trainable flags.
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    scheme: &AdaptationScheme,
    corpus: &Corpus,
    store: ParamStore<f32>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut store = store;
    let mut trace = Vec::with_capacity(cfg.steps);
    if cfg.steps == 0 {
        return Ok(TrainOutcome { store, trace });
    }
    if corpus.is_empty() {
        return Err(Error::EmptyInput("training corpus is empty"));
    }
    let hooks = build_hooks::<f32>(model, scheme);
    let mut state = AdamState::new();
    let n = corpus.len();
    let mut order = batch_order(n, cfg.seed, 0);
    let mut cursor = 0;
    let mut epoch = 0;
    for step in 1..=cfg.steps {
        let mut grads: GradStore<f32> = GradStore::new();
        let mut total = 0.0;
        for b in 0..cfg.batch_size {
            if cursor == n {
                epoch += 1;
                order = batch_order(n, cfg.seed, epoch);
                cursor = 0;
            }
            let u = &corpus.utterances[order[cursor]];
            cursor += 1;
            let mut ctx = Ctx::new(&store, true).with_seed(cfg.seed, (step * cfg.batch_size + b) as u64);
            let utt_seed = mix(&[cfg.seed, step as u64, b as u64]);
            let (loss, parts) =
                utterance_loss(&mut ctx, model, scheme, &hooks, &u.features.frames, &u.transcript, utt_seed)?;
            if !parts.total.is_finite() {
                return Err(Error::Numeric {
                    step,
                    detail: format!("loss is {} on utterance {}", parts.total, u.id),
                });
            }
            total += parts.total;
            let g = ctx.g.backward(loss)?;
            ctx.accumulate(&g, &mut grads);
        }
        let inv = 1.0 / cfg.batch_size as f32;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= inv;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
        }
        let lr = cfg.adam.lr * cfg.schedule.factor(step);
        adam_step(&mut store, &grads, &mut state, &cfg.adam, lr);
        let mean = total / cfg.batch_size as f64;
        trace.push(mean);
        if step % 50 == 0 || step == cfg.steps {
            log::debug!("step {step}: loss {mean:.4}");
        }
    }
    Ok(TrainOutcome { store, trace })
}

/// Median of the first and last `window` trace entries.
pub fn window_medians(trace: &[f64], window: usize) -> Option<(f64, f64)> {
    if window == 0 || trace.len() < window {
        return None;
    }
    Some((median(&trace[..window]), median(&trace[trace.len() - window..])))
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
