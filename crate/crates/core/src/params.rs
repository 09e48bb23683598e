//! Named parameter tensors and the per-forward binding of those tensors into a
//! [`Graph`].

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DropoutKey, Gradients, Graph, Scalar, Tensor, Var};

/// What a parameter is, independent of which module owns it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
    Reprogram,
    Adapter,
    Probe,
}

impl Role {
    pub const ALL: [Role; 5] = [Role::Weight, Role::Bias, Role::Reprogram, Role::Adapter, Role::Probe];

    pub fn tag(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
            Role::Reprogram => 2,
            Role::Adapter => 3,
            Role::Probe => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Role> {
        Role::ALL.get(tag as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
            Role::Reprogram => "reprogram",
            Role::Adapter => "adapter",
            Role::Probe => "probe",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S = f32> {
    pub value: Tensor<S>,
    pub role: Role,
    pub trainable: bool,
}

/// Ordered map of named parameters. Iteration order is lexical by name.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S = f32> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    /// Inserts a trainable parameter, replacing any previous one of that name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>, role: Role) {
        self.params.insert(
            name.into(),
            Param {
                value,
                role,
                trainable: true,
            },
        );
    }

    pub fn insert_param(&mut self, name: impl Into<String>, param: Param<S>) {
        self.params.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Param<S>> {
        self.get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<S>> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<S>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<S>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn numel_where(&self, mut pred: impl FnMut(&str, &Param<S>) -> bool) -> usize {
        self.iter().filter(|(n, p)| pred(n, p)).map(|(_, p)| p.value.len()).sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.params.values_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            role: p.role,
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Accumulated gradients keyed by parameter name.
pub type GradStore<S> = BTreeMap<String, Vec<S>>;

/// Uniform Xavier/Glorot initialization for a `[fan_in x fan_out]` matrix.
pub fn xavier<S: Scalar>(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(&[fan_in, fan_out], bound, rng)
}

pub fn uniform<S: Scalar>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| S::of(rng.random_range(-bound..=bound)))
}

/// One forward pass: a graph plus the parameters bound into it so far.
///
/// Parameters become graph leaves on first use; a frozen parameter becomes a
/// leaf with `requires_grad = false` and so never receives a gradient.
pub struct Ctx<'a, S: Scalar = f32> {
    pub g: Graph<S>,
    store: &'a ParamStore<S>,
    bound: BTreeMap<String, Var>,
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl<'a, S: Scalar> Ctx<'a, S> {
    pub fn new(store: &'a ParamStore<S>, train: bool) -> Self {
        Ctx {
            g: Graph::new(),
            store,
            bound: BTreeMap::new(),
            train,
            seed: 0,
            step: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64, step: u64) -> Self {
        self.seed = seed;
        self.step = step;
        self
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Leaf for parameter `name`, created on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self.store.require(name)?;
        let v = self.g.leaf(param.value.clone(), param.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x·W + b` with parameters `{prefix}.w` and `{prefix}.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        self.g.linear(x, w, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        self.g.layer_norm(x, gamma, beta)
    }

    pub fn dropout(&mut self, x: Var, rate: f64, layer: u64) -> Result<Var> {
        let key = DropoutKey {
            seed: self.seed,
            step: self.step,
            layer,
        };
        self.g.dropout(x, rate, key, self.train)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Adds gradients of every bound trainable parameter into `into`.
    pub fn accumulate(&self, grads: &Gradients<S>, into: &mut GradStore<S>) {
        for (name, &v) in &self.bound {
            if let Some(gv) = grads.get(v) {
                let slot = into
                    .entry(name.clone())
                    .or_insert_with(|| vec![S::zero(); gv.len()]);
                for (s, &d) in slot.iter_mut().zip(gv) {
                    *s += d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_tags_round_trip() {
        for r in Role::ALL {
            assert_eq!(Role::from_tag(r.tag()), Some(r));
        }
        assert_eq!(Role::from_tag(99), None);
    }

    #[test]
    fn frozen_parameters_never_receive_gradients() {
        let mut store = ParamStore::<f64>::new();
        store.insert("a.w", Tensor::full(&[2, 2], 0.5), Role::Weight);
        store.insert("a.b", Tensor::zeros(&[2]), Role::Bias);
        store.get_mut("a.w").unwrap().trainable = false;

        let mut grads: GradStore<f64> = BTreeMap::new();
        grads.insert("a.w".into(), vec![f64::NAN; 4]);

        let mut ctx = Ctx::new(&store, true);
        let x = ctx.g.constant(Tensor::full(&[3, 2], 1.0));
        let y = ctx.linear("a", x).unwrap();
        let loss = ctx.g.sum(y);
        let gr = ctx.g.backward(loss).unwrap();
        ctx.accumulate(&gr, &mut grads);

        assert!(grads["a.w"].iter().all(|v| v.is_nan()), "poisoned slot was written");
        assert_eq!(grads["a.b"], vec![3.0, 3.0]);
    }

    #[test]
    fn missing_parameter_is_a_config_error() {
        let store = ParamStore::<f32>::new();
        let mut ctx = Ctx::new(&store, false);
        assert!(matches!(ctx.p("nope"), Err(Error::Config(_))));
    }
}
