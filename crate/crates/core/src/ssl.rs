//! Self-supervised objectives trained jointly with the transducer loss:
//! span masking, a nearest-neighbour codebook, InfoNCE over masked frames,
//! masked code prediction and a codebook diversity penalty.
//!
//! The encoder output feeds a contrastive conformer stack and then a masked
//! prediction stack; the transducer reads the latter's output.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformer::{conformer_block_forward, layer_spec, linear_spec, materialize, ConformerConfig, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore, Role};
use crate::tensor::{counter_rng, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub mask_ratio: f64,
    pub mask_span_length: usize,
    pub codebook_size: usize,
    pub num_distractors: usize,
    /// Cosine-similarity temperature of the contrastive loss.
    pub temperature: f64,
    /// Temperature of the soft code assignment behind the usage statistics.
    pub assign_temperature: f64,
    pub contrastive_layers: usize,
    pub mlm_layers: usize,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            gamma: 0.01,
            alpha: 0.1,
            mask_ratio: 0.065,
            mask_span_length: 1,
            codebook_size: 64,
            num_distractors: 8,
            temperature: 0.1,
            assign_temperature: 1.0,
            contrastive_layers: 2,
            mlm_layers: 2,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::config(format!("mask_ratio {} outside (0, 1)", self.mask_ratio)));
        }
        if self.gamma < 0.0 || self.alpha < 0.0 {
            return Err(Error::config("gamma and alpha must be >= 0"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook needs at least 2 codes"));
        }
        if self.mask_span_length == 0 || self.num_distractors == 0 {
            return Err(Error::config("mask span and distractor count must be >= 1"));
        }
        if self.temperature <= 0.0 || self.assign_temperature <= 0.0 {
            return Err(Error::config("temperatures must be > 0"));
        }
        Ok(())
    }
}

pub const SSL_PREFIX: &str = "ssl";

pub fn contrastive_prefix(i: usize) -> String {
    format!("{SSL_PREFIX}.contrastive.{i}")
}

pub fn mlm_prefix(i: usize) -> String {
    format!("{SSL_PREFIX}.mlm.{i}")
}

pub(crate) fn ssl_spec(enc: &ConformerConfig, cfg: &SslConfig) -> ParamSpec {
    let d = enc.model_dim;
    let mut s = ParamSpec::new();
    s.push((format!("{SSL_PREFIX}.mask_emb"), vec![d], Role::Weight, Init::Xavier(1, d)));
    s.push((
        format!("{SSL_PREFIX}.codebook"),
        vec![cfg.codebook_size, d],
        Role::Weight,
        Init::Xavier(1, d),
    ));
    for i in 0..cfg.contrastive_layers {
        s.extend(layer_spec(&contrastive_prefix(i), d, enc));
    }
    for i in 0..cfg.mlm_layers {
        s.extend(layer_spec(&mlm_prefix(i), d, enc));
    }
    linear_spec(&mut s, &format!("{SSL_PREFIX}.mlm_head"), d, cfg.codebook_size);
    s
}

pub fn init_ssl<S: Scalar>(store: &mut ParamStore<S>, enc: &ConformerConfig, cfg: &SslConfig, rng: &mut ChaCha8Rng) {
    materialize(store, ssl_spec(enc, cfg), rng);
}

pub fn has_ssl<S: Scalar>(store: &ParamStore<S>) -> bool {
    store.contains(&format!("{SSL_PREFIX}.codebook"))
}

/// Frames to mask: `max(1, floor(ratio·T))` span starts drawn without
/// replacement, each covering `mask_span_length` frames. Sorted, unique.
pub fn sample_mask(t: usize, cfg: &SslConfig, seed: u64) -> Result<Vec<usize>> {
    let span = cfg.mask_span_length;
    if t < span || t == 0 {
        return Err(Error::contract(format!("cannot mask spans of {span} in {t} frames")));
    }
    let candidates = t - span + 1;
    let starts = ((cfg.mask_ratio * t as f64).floor() as usize).clamp(1, candidates);
    let mut rng = ChaCha8Rng::seed_from_u64(counter_rng::mix(&[seed, 0x6d61_736b]));
    let mut frames: Vec<usize> = sample(&mut rng, candidates, starts)
        .into_iter()
        .flat_map(|s| s..s + span)
        .collect();
    frames.sort_unstable();
    frames.dedup();
    Ok(frames)
}

/// Number of span starts `sample_mask` draws for `t` frames.
pub fn mask_start_count(t: usize, cfg: &SslConfig) -> usize {
    ((cfg.mask_ratio * t as f64).floor() as usize).clamp(1, t + 1 - cfg.mask_span_length)
}

/// Replaces the rows in `frames` with the learned mask embedding `[d]`.
pub fn mask_features<S: Scalar>(g: &mut Graph<S>, h: Var, mask_emb: Var, frames: &[usize]) -> Result<Var> {
    let (t, d) = (g.shape(h)[0], g.shape(h)[1]);
    if g.value(mask_emb).len() != d {
        return Err(Error::shape("mask_features", g.shape(h), g.shape(mask_emb)));
    }
    if let Some(&bad) = frames.iter().find(|&&f| f >= t) {
        return Err(Error::contract(format!("mask frame {bad} outside {t} frames")));
    }
    let mut keep = Tensor::full(&[t, 1], S::one());
    for &f in frames {
        keep.data_mut()[f] = S::zero();
    }
    let drop = Tensor::from_fn(&[t, 1], |i| S::one() - keep.data()[i]);
    let keep = g.constant(keep);
    let drop = g.constant(drop);
    let kept = g.scale_rows(h, keep)?;
    let table = g.reshape(mask_emb, &[1, d])?;
    let emb = g.embedding(table, &vec![0; t])?;
    let emb = g.scale_rows(emb, drop)?;
    g.add(kept, emb)
}

pub struct Quantized {
    pub ids: Vec<usize>,
    /// Code vectors in the forward pass, gradient passed straight to the input.
    pub quantized: Var,
    /// Soft assignment `softmax(-dist² / τ)`, `[T x V_c]`.
    pub soft: Var,
}

/// Nearest code per row of `h`; ties go to the lower index.
pub fn quantize<S: Scalar>(g: &mut Graph<S>, h: Var, codebook: Var, assign_temperature: f64) -> Result<Quantized> {
    let vc = g.shape(codebook)[0];
    if vc < 2 {
        return Err(Error::contract("codebook needs at least 2 codes"));
    }
    let dist = g.sq_dist(h, codebook)?;
    let dv = g.value(dist).clone();
    let ids: Vec<usize> = (0..dv.rows())
        .map(|r| {
            let row = dv.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let cb = g.value(codebook).clone();
    let d = cb.cols();
    let mut qv = Vec::with_capacity(ids.len() * d);
    for &i in &ids {
        qv.extend_from_slice(cb.row(i));
    }
    let qv = Tensor::new(g.shape(h), qv)?;
    let quantized = g.straight_through(h, qv)?;
    let logits = g.scale(dist, -1.0 / assign_temperature);
    let soft = g.softmax(logits);
    Ok(Quantized { ids, quantized, soft })
}

/// Mean soft assignment `[1 x V_c]`.
pub fn usage<S: Scalar>(g: &mut Graph<S>, soft: Var) -> Var {
    g.mean_rows(soft)
}

/// Candidate rows for each masked frame: the frame itself, then
/// `num_distractors` other masked frames (with replacement when too few,
/// any other frame when it is the only masked one).
pub fn distractor_sets(t: usize, masked: &[usize], num_distractors: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if masked.is_empty() {
        return Err(Error::contract("contrastive loss needs a masked frame"));
    }
    if t < 2 {
        return Err(Error::contract("contrastive loss needs a second frame for distractors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(counter_rng::mix(&[seed, 0x6469_7374]));
    Ok(masked
        .iter()
        .map(|&m| {
            let mut pool: Vec<usize> = masked.iter().copied().filter(|&o| o != m).collect();
            if pool.is_empty() {
                pool = (0..t).filter(|&o| o != m).collect();
            }
            let mut set = vec![m];
            if pool.len() >= num_distractors {
                set.extend(sample(&mut rng, pool.len(), num_distractors).into_iter().map(|i| pool[i]));
            } else {
                set.extend((0..num_distractors).map(|_| pool[rng.random_range(0..pool.len())]));
            }
            set
        })
        .collect())
}

/// InfoNCE over masked frames with cosine similarity at temperature `κ`.
/// `sets[i][0]` is the positive target for `masked[i]`.
pub fn contrastive_loss<S: Scalar>(
    g: &mut Graph<S>,
    context: Var,
    targets: Var,
    masked: &[usize],
    sets: &[Vec<usize>],
    temperature: f64,
) -> Result<Var> {
    if masked.is_empty() || masked.len() != sets.len() {
        return Err(Error::contract("one candidate set per masked frame required"));
    }
    let t = g.shape(context)[0];
    let k = sets[0].len();
    if sets.iter().any(|s| s.len() != k || s.len() < 2) {
        return Err(Error::contract("candidate sets need a target and at least one distractor"));
    }
    let c = g.normalize_rows(context);
    let q = g.normalize_rows(targets);
    let qt = g.transpose(q)?;
    let sims = g.matmul(c, qt)?;
    let sims = g.scale(sims, 1.0 / temperature);
    let idx: Vec<usize> = masked
        .iter()
        .zip(sets)
        .flat_map(|(&m, set)| set.iter().map(move |&j| m * t + j))
        .collect();
    let logits = g.gather(sims, &idx, &[masked.len(), k])?;
    let lp = g.log_softmax(logits);
    let pos: Vec<usize> = (0..masked.len()).map(|i| i * k).collect();
    let pos = g.gather(lp, &pos, &[masked.len()])?;
    let total = g.sum(pos);
    Ok(g.scale(total, -1.0 / masked.len() as f64))
}

/// Cross-entropy of each masked frame's code id under `logits: [T x V_c]`.
pub fn mlm_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, ids: &[usize], masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::contract("masked prediction needs a masked frame"));
    }
    let vc = g.shape(logits)[1];
    let lp = g.log_softmax(logits);
    let idx: Vec<usize> = masked.iter().map(|&m| m * vc + ids[m]).collect();
    let picked = g.gather(lp, &idx, &[masked.len()])?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / masked.len() as f64))
}

/// `1 - H(p̄) / ln V_c`.
pub fn diversity_loss<S: Scalar>(g: &mut Graph<S>, pbar: Var) -> Var {
    let vc = g.value(pbar).len();
    let h = g.entropy(pbar);
    let scaled = g.scale(h, -1.0 / (vc as f64).ln());
    let one = g.constant(Tensor::scalar(S::one()));
    g.add(one, scaled).expect("scalars")
}

/// `L_rnnt + γ(L_c + L_mlm + α·L_div)`.
pub fn just_total_loss(l_rnnt: f64, l_c: f64, l_mlm: f64, l_div: f64, cfg: &SslConfig) -> f64 {
    l_rnnt + cfg.gamma * (l_c + l_mlm + cfg.alpha * l_div)
}

/// Same combination as a graph node.
pub fn just_total<S: Scalar>(g: &mut Graph<S>, l_rnnt: Var, l_c: Var, l_mlm: Var, l_div: Var, cfg: &SslConfig) -> Result<Var> {
    let div = g.scale(l_div, cfg.alpha);
    let ssl = g.add(l_c, l_mlm)?;
    let ssl = g.add(ssl, div)?;
    let ssl = g.scale(ssl, cfg.gamma);
    g.add(l_rnnt, ssl)
}

/// Values of the self-supervised terms of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SslTerms<V> {
    pub contrastive: V,
    pub mlm: V,
    pub diversity: V,
}

pub struct SslOutput {
    /// Input for the transducer.
    pub output: Var,
    pub terms: Option<SslTerms<Var>>,
}

/// Runs the contrastive and masked-prediction stacks over encoder output `h`.
/// With `losses`, masks `h` first and returns the three loss nodes.
pub fn ssl_forward<S: Scalar>(
    ctx: &mut Ctx<S>,
    enc: &ConformerConfig,
    cfg: &SslConfig,
    h: Var,
    losses: bool,
    seed: u64,
) -> Result<SslOutput> {
    let layer_base = 1000;
    let mut x = h;
    let mut masked = Vec::new();
    let mut quant = None;
    if losses {
        let t = ctx.g.shape(h)[0];
        masked = sample_mask(t, cfg, seed)?;
        let codebook = ctx.p(&format!("{SSL_PREFIX}.codebook"))?;
        quant = Some(quantize(&mut ctx.g, h, codebook, cfg.assign_temperature)?);
        let emb = ctx.p(&format!("{SSL_PREFIX}.mask_emb"))?;
        x = mask_features(&mut ctx.g, h, emb, &masked)?;
    }
    for i in 0..cfg.contrastive_layers {
        x = conformer_block_forward(ctx, &contrastive_prefix(i), x, enc, layer_base + i as u64)?;
    }
    let context = x;
    for i in 0..cfg.mlm_layers {
        x = conformer_block_forward(ctx, &mlm_prefix(i), x, enc, layer_base + 100 + i as u64)?;
    }
    let terms = match quant {
        Some(q) => {
            let t = ctx.g.shape(h)[0];
            let sets = distractor_sets(t, &masked, cfg.num_distractors, seed)?;
            let contrastive = contrastive_loss(&mut ctx.g, context, q.quantized, &masked, &sets, cfg.temperature)?;
            let logits = ctx.linear(&format!("{SSL_PREFIX}.mlm_head"), x)?;
            let mlm = mlm_loss(&mut ctx.g, logits, &q.ids, &masked)?;
            let pbar = usage(&mut ctx.g, q.soft);
            let diversity = diversity_loss(&mut ctx.g, pbar);
            Some(SslTerms {
                contrastive,
                mlm,
                diversity,
            })
        }
        None => None,
    };
    Ok(SslOutput { output: x, terms })
}
