//! RNN-T predictor, joint network, transducer loss and greedy decoding.
//!
//! Lattice rows are laid out as `t * (U + 1) + u`, columns are the output
//! symbols with blank at index [`BLANK`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformer::{linear_spec, materialize, Init, ParamSpec};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore, Role};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Blank symbol id. Also the predictor's start-of-sequence input.
pub const BLANK: usize = 0;

/// Label ids, each in `1..vocab_size`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transcript(pub Vec<u16>);

impl Transcript {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(|&v| v as usize)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransducerConfig {
    /// Output symbols including blank.
    pub vocab_size: usize,
    pub pred_dim: usize,
    pub joint_dim: usize,
    pub max_symbols_per_frame: usize,
}

impl Default for TransducerConfig {
    fn default() -> Self {
        TransducerConfig {
            vocab_size: 81,
            pred_dim: 64,
            joint_dim: 64,
            max_symbols_per_frame: 4,
        }
    }
}

impl TransducerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.pred_dim == 0 || self.joint_dim == 0 {
            return Err(Error::config(format!("degenerate transducer config {self:?}")));
        }
        if self.max_symbols_per_frame == 0 {
            return Err(Error::config("max_symbols_per_frame must be >= 1"));
        }
        Ok(())
    }
}

pub const PREDICTOR_LAYERS: usize = 2;
pub const HEAD_PREFIX: &str = "joint.out";
pub const PROBE_PREFIX: &str = "probe";

pub(crate) fn decoder_spec(cfg: &TransducerConfig, enc_dim: usize) -> ParamSpec {
    let (v, p, j) = (cfg.vocab_size, cfg.pred_dim, cfg.joint_dim);
    let mut s = ParamSpec::new();
    s.push(("predictor.embed".into(), vec![v, p], Role::Weight, Init::Xavier(v, p)));
    for l in 0..PREDICTOR_LAYERS {
        let pre = format!("predictor.lstm{l}");
        s.push((format!("{pre}.wx"), vec![p, 4 * p], Role::Weight, Init::Xavier(p, 4 * p)));
        s.push((format!("{pre}.wh"), vec![p, 4 * p], Role::Weight, Init::Xavier(p, 4 * p)));
        s.push((format!("{pre}.b"), vec![4 * p], Role::Bias, Init::Zeros));
    }
    linear_spec(&mut s, "joint.enc", enc_dim, j);
    s.push(("joint.pred.w".into(), vec![p, j], Role::Weight, Init::Xavier(p, j)));
    linear_spec(&mut s, HEAD_PREFIX, j, v);
    s
}

pub fn init_decoder<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &TransducerConfig,
    enc_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    materialize(store, decoder_spec(cfg, enc_dim), rng);
}

/// Replaces the output head with a fresh random draw.
pub fn reinit_head<S: Scalar>(store: &mut ParamStore<S>, cfg: &TransducerConfig, rng: &mut ChaCha8Rng) {
    let mut s = ParamSpec::new();
    linear_spec(&mut s, HEAD_PREFIX, cfg.joint_dim, cfg.vocab_size);
    materialize(store, s, rng);
}

/// Identity-initialized dense layer applied after the output head.
pub fn init_probe<S: Scalar>(store: &mut ParamStore<S>, cfg: &TransducerConfig) {
    let v = cfg.vocab_size;
    store.insert(format!("{PROBE_PREFIX}.w"), Tensor::eye(v), Role::Probe);
    store.insert(format!("{PROBE_PREFIX}.b"), Tensor::zeros(&[v]), Role::Probe);
}

/// Recurrent state of the two-layer predictor, `(h, c)` per layer.
#[derive(Clone, Copy, Debug)]
pub struct PredictorState {
    pub layers: [(Var, Var); PREDICTOR_LAYERS],
}

impl PredictorState {
    pub fn zeros<S: Scalar>(g: &mut Graph<S>, pred_dim: usize) -> Self {
        let z = g.constant(Tensor::zeros(&[1, pred_dim]));
        PredictorState {
            layers: [(z, z); PREDICTOR_LAYERS],
        }
    }
}

fn lstm_cell<S: Scalar>(
    ctx: &mut Ctx<S>,
    prefix: &str,
    x: Var,
    (h, c): (Var, Var),
    p: usize,
) -> Result<(Var, Var)> {
    let wx = ctx.p(&format!("{prefix}.wx"))?;
    let wh = ctx.p(&format!("{prefix}.wh"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    let xg = ctx.g.matmul(x, wx)?;
    let hg = ctx.g.matmul(h, wh)?;
    let gates = ctx.g.add(xg, hg)?;
    let gates = ctx.g.add_bias(gates, b)?;
    let i = ctx.g.slice_cols(gates, 0, p)?;
    let f = ctx.g.slice_cols(gates, p, p)?;
    let gg = ctx.g.slice_cols(gates, 2 * p, p)?;
    let o = ctx.g.slice_cols(gates, 3 * p, p)?;
    let i = ctx.g.sigmoid(i);
    let f = ctx.g.sigmoid(f);
    let gg = ctx.g.tanh(gg);
    let o = ctx.g.sigmoid(o);
    let fc = ctx.g.mul(f, c)?;
    let ig = ctx.g.mul(i, gg)?;
    let c2 = ctx.g.add(fc, ig)?;
    let tc = ctx.g.tanh(c2);
    let h2 = ctx.g.mul(o, tc)?;
    Ok((h2, c2))
}

/// Consumes one symbol; returns the top-layer output `[1 x P]` and new state.
pub fn predictor_step<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &TransducerConfig,
    symbol: usize,
    state: PredictorState,
) -> Result<(Var, PredictorState)> {
    if symbol >= cfg.vocab_size {
        return Err(Error::contract(format!(
            "label id {symbol} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let table = ctx.p("predictor.embed")?;
    let mut x = ctx.g.embedding(table, &[symbol])?;
    let mut next = state;
    for l in 0..PREDICTOR_LAYERS {
        let hc = lstm_cell(ctx, &format!("predictor.lstm{l}"), x, state.layers[l], cfg.pred_dim)?;
        next.layers[l] = hc;
        x = hc.0;
    }
    Ok((x, next))
}

/// Encodings of every label prefix: row `u` has seen `labels[..u]`.
/// Returns `[U+1 x P]`.
pub fn predictor_forward<S: Scalar>(
    ctx: &mut Ctx<S>,
    cfg: &TransducerConfig,
    labels: &Transcript,
) -> Result<Var> {
    if let Some(bad) = labels.ids().find(|&id| id >= cfg.vocab_size || id == BLANK) {
        return Err(Error::contract(format!(
            "label id {bad} invalid for vocabulary of {} (blank is {BLANK})",
            cfg.vocab_size
        )));
    }
    let mut state = PredictorState::zeros(&mut ctx.g, cfg.pred_dim);
    let mut rows = Vec::with_capacity(labels.len() + 1);
    for sym in std::iter::once(BLANK).chain(labels.ids()) {
        let (out, next) = predictor_step(ctx, cfg, sym, state)?;
        rows.push(out);
        state = next;
    }
    ctx.g.concat_rows(&rows)
}

/// Log-probability lattice `[T·(U+1) x V]`.
#[derive(Clone, Copy, Debug)]
pub struct JointLattice {
    pub var: Var,
    pub frames: usize,
    pub labels: usize,
    pub vocab: usize,
}

impl JointLattice {
    pub fn row(&self, t: usize, u: usize) -> usize {
        t * (self.labels + 1) + u
    }
}

fn head_logits<S: Scalar>(ctx: &mut Ctx<S>, z: Var) -> Result<Var> {
    let mut logits = ctx.linear(HEAD_PREFIX, z)?;
    if ctx.has(&format!("{PROBE_PREFIX}.w")) {
        logits = linear_probe_head(ctx, logits)?;
    }
    Ok(logits)
}

/// Dense layer appended after the output head.
pub fn linear_probe_head<S: Scalar>(ctx: &mut Ctx<S>, logits: Var) -> Result<Var> {
    ctx.linear(PROBE_PREFIX, logits)
}

/// `z[t,u,·] = log_softmax(W_out · tanh(W_e·enc_t + W_p·pred_u + b))`.
pub fn joint_logits<S: Scalar>(ctx: &mut Ctx<S>, enc: Var, pred: Var) -> Result<JointLattice> {
    let t = ctx.g.shape(enc)[0];
    let u1 = ctx.g.shape(pred)[0];
    let e = ctx.linear("joint.enc", enc)?;
    let wp = ctx.p("joint.pred.w")?;
    let p = ctx.g.matmul(pred, wp)?;
    let t_idx: Vec<usize> = (0..t * u1).map(|r| r / u1).collect();
    let u_idx: Vec<usize> = (0..t * u1).map(|r| r % u1).collect();
    let ei = ctx.g.embedding(e, &t_idx)?;
    let pi = ctx.g.embedding(p, &u_idx)?;
    let z = ctx.g.add(ei, pi)?;
    let z = ctx.g.tanh(z);
    let logits = head_logits(ctx, z)?;
    let vocab = ctx.g.shape(logits)[1];
    let var = ctx.g.log_softmax(logits);
    Ok(JointLattice {
        var,
        frames: t,
        labels: u1 - 1,
        vocab,
    })
}

fn logadd(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Transducer negative log-likelihood and its gradient w.r.t. every lattice
/// entry, by the forward (α) and backward (β) recursions in log space.
///
/// `logp` is `[T·(U+1) x V]` row-major.
pub fn rnnt_forward_backward(
    logp: &[f64],
    frames: usize,
    vocab: usize,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    if frames == 0 {
        return Err(Error::EmptyInput("transducer loss needs T >= 1"));
    }
    let u_len = labels.len();
    let u1 = u_len + 1;
    if logp.len() != frames * u1 * vocab {
        return Err(Error::shape("rnnt_loss", &[frames, u1, vocab], &[logp.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= vocab || l == BLANK) {
        return Err(Error::contract(format!("label {bad} invalid for vocab {vocab}")));
    }
    let at = |t: usize, u: usize, k: usize| logp[(t * u1 + u) * vocab + k];
    let blank = |t, u| at(t, u, BLANK);
    let emit = |t, u| at(t, u, labels[u]);

    let mut alpha = vec![f64::NEG_INFINITY; frames * u1];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..u1 {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[(t - 1) * u1 + u] + blank(t - 1, u);
            }
            if u > 0 {
                a = logadd(a, alpha[t * u1 + u - 1] + emit(t, u - 1));
            }
            alpha[t * u1 + u] = a;
        }
    }
    let log_like = alpha[(frames - 1) * u1 + u_len] + blank(frames - 1, u_len);

    let mut beta = vec![f64::NEG_INFINITY; frames * u1];
    beta[(frames - 1) * u1 + u_len] = blank(frames - 1, u_len);
    for t in (0..frames).rev() {
        for u in (0..u1).rev() {
            if t == frames - 1 && u == u_len {
                continue;
            }
            let mut b = f64::NEG_INFINITY;
            if t + 1 < frames {
                b = beta[(t + 1) * u1 + u] + blank(t, u);
            }
            if u < u_len {
                b = logadd(b, beta[t * u1 + u + 1] + emit(t, u));
            }
            beta[t * u1 + u] = b;
        }
    }

    let mut grad = vec![0.0; logp.len()];
    for t in 0..frames {
        for u in 0..u1 {
            let a = alpha[t * u1 + u];
            let row = (t * u1 + u) * vocab;
            let next_blank = if t + 1 < frames {
                beta[(t + 1) * u1 + u]
            } else if u == u_len {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad[row + BLANK] = -(a + blank(t, u) + next_blank - log_like).exp();
            if u < u_len {
                grad[row + labels[u]] = -(a + emit(t, u) + beta[t * u1 + u + 1] - log_like).exp();
            }
        }
    }
    Ok((-log_like, grad))
}

/// Transducer loss node on `lattice` for `labels`.
pub fn rnnt_loss<S: Scalar>(g: &mut Graph<S>, lattice: &JointLattice, labels: &Transcript) -> Result<Var> {
    if labels.len() != lattice.labels {
        return Err(Error::contract(format!(
            "lattice built for {} labels, transcript has {}",
            lattice.labels,
            labels.len()
        )));
    }
    let logp: Vec<f64> = g.value(lattice.var).data().iter().map(|v| v.as_f64()).collect();
    let ids: Vec<usize> = labels.ids().collect();
    let (loss, grad) = rnnt_forward_backward(&logp, lattice.frames, lattice.vocab, &ids)?;
    g.precomputed_scalar(
        lattice.var,
        S::of(loss),
        grad.into_iter().map(S::of).collect(),
    )
}

/// Largest `T + U` the enumeration oracle accepts.
pub const BRUTEFORCE_LIMIT: usize = 12;

/// Number of monotonic alignments for `frames` frames and `labels` labels.
pub fn alignment_count(frames: usize, labels: usize) -> usize {
    let mut n = 0;
    enumerate_paths(frames, labels, &mut |_| n += 1);
    n
}

/// Walks every alignment: each is a sequence of moves from `(0, 0)`,
/// `false` = blank (advance t), `true` = label (advance u), ending with the
/// blank emitted at `(T-1, U)`.
fn enumerate_paths(frames: usize, labels: usize, visit: &mut dyn FnMut(&[(usize, usize, bool)])) {
    fn go(
        t: usize,
        u: usize,
        frames: usize,
        labels: usize,
        path: &mut Vec<(usize, usize, bool)>,
        visit: &mut dyn FnMut(&[(usize, usize, bool)]),
    ) {
        if t == frames - 1 && u == labels {
            path.push((t, u, false));
            visit(path);
            path.pop();
            return;
        }
        if t + 1 < frames {
            path.push((t, u, false));
            go(t + 1, u, frames, labels, path, visit);
            path.pop();
        }
        if u < labels {
            path.push((t, u, true));
            go(t, u + 1, frames, labels, path, visit);
            path.pop();
        }
    }
    if frames > 0 {
        go(0, 0, frames, labels, &mut Vec::new(), visit);
    }
}

/// Exact transducer loss by enumerating every alignment. Test oracle.
pub fn rnnt_loss_bruteforce(logp: &[f64], frames: usize, vocab: usize, labels: &[usize]) -> Result<f64> {
    if frames == 0 {
        return Err(Error::EmptyInput("transducer loss needs T >= 1"));
    }
    if frames + labels.len() > BRUTEFORCE_LIMIT {
        return Err(Error::Refused(format!(
            "T + U = {} exceeds enumeration limit {BRUTEFORCE_LIMIT}",
            frames + labels.len()
        )));
    }
    let u1 = labels.len() + 1;
    if logp.len() != frames * u1 * vocab {
        return Err(Error::shape("rnnt_loss_bruteforce", &[frames, u1, vocab], &[logp.len()]));
    }
    let mut scores = Vec::new();
    enumerate_paths(frames, labels.len(), &mut |path| {
        let s: f64 = path
            .iter()
            .map(|&(t, u, is_label)| {
                let k = if is_label { labels[u] } else { BLANK };
                logp[(t * u1 + u) * vocab + k]
            })
            .sum();
        scores.push(s);
    });
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    Ok(-total)
}

/// Greedy transducer decoding: per frame, emit argmax symbols until blank
/// wins or `max_symbols_per_frame` is reached.
pub fn greedy_decode<S: Scalar>(ctx: &mut Ctx<S>, cfg: &TransducerConfig, enc: Var) -> Result<Transcript> {
    let t_len = ctx.g.shape(enc)[0];
    let e = ctx.linear("joint.enc", enc)?;
    let wp = ctx.p("joint.pred.w")?;
    let mut state = PredictorState::zeros(&mut ctx.g, cfg.pred_dim);
    let (mut pred, s) = predictor_step(ctx, cfg, BLANK, state)?;
    state = s;
    let mut out = Vec::new();
    for t in 0..t_len {
        let et = ctx.g.slice_rows(e, t, 1)?;
        for _ in 0..cfg.max_symbols_per_frame {
            let p = ctx.g.matmul(pred, wp)?;
            let z = ctx.g.add(et, p)?;
            let z = ctx.g.tanh(z);
            let logits = head_logits(ctx, z)?;
            let best = argmax(ctx.g.value(logits).data());
            if best == BLANK {
                break;
            }
            out.push(best as u16);
            let (np, ns) = predictor_step(ctx, cfg, best, state)?;
            pred = np;
            state = ns;
        }
    }
    Ok(Transcript(out))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<S: Scalar>(v: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Random log-normalized lattice for tests and oracles.
pub fn random_lattice(frames: usize, labels: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let rows = frames * (labels + 1);
    let mut out = Vec::with_capacity(rows * vocab);
    for _ in 0..rows {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.random_range(-2.0..2.0)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        out.extend(logits.iter().map(|l| l - lse));
    }
    out
}
