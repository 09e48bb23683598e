//! Central finite-difference gradient checks and seeded random tensors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{Ctx, GradStore, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * R)` for a fixed random `R`, so every output element matters.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let r = g.constant(random_tensor(g.shape(y), seed ^ 0xABCD));
    let p = g.mul(y, r).expect("same shape");
    g.sum(p)
}

/// Largest per-input relative error `|ad - fd| / max(|ad|, |fd|)` (L2 norms)
/// between reverse-mode and central-difference gradients, step 1e-5.
pub fn grad_check<F>(build: F, inputs: Vec<Tensor<f64>>) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars).expect("forward");
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars).expect("forward");
    let grads = g.backward(loss).expect("backward");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let ad: Vec<f64> = grads
            .get(vars[k])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut fd = vec![0.0; input.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = ad.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&ad).max(norm(&fd));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Same relative-error measure as [`grad_check`], over every trainable
/// parameter of `store`, with the model built by `build`.
pub fn grad_check_store<F>(store: &ParamStore<f64>, build: F) -> f64
where
    F: Fn(&mut Ctx<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut ctx = Ctx::new(s, true);
        let loss = build(&mut ctx).expect("forward");
        ctx.g.value(loss).item()
    };
    let mut ctx = Ctx::new(store, true);
    let loss = build(&mut ctx).expect("forward");
    let grads = ctx.g.backward(loss).expect("backward");
    let mut ad = GradStore::new();
    ctx.accumulate(&grads, &mut ad);

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, p) in store.iter().filter(|(_, p)| p.trainable) {
        let a = ad.get(name).cloned().unwrap_or_else(|| vec![0.0; p.value.len()]);
        let mut fd = vec![0.0; p.value.len()];
        for (i, slot) in fd.iter_mut().enumerate() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().value.data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().value.data_mut()[i] -= h;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        let diff = a.iter().zip(&fd).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = norm(&a).max(norm(&fd));
        if scale > 1e-10 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}
