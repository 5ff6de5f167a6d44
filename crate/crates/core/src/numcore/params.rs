use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tape::{Gradients, Tape, Var};
use crate::numcore::tensor::Tensor;

/// Std of the zero-mean normal used for weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Named parameters, ordered by name so iteration is deterministic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn init_normal<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], rng: &mut R) {
        self.insert(name, Tensor::randn(shape, INIT_STD, rng));
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn init_ones(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::ones(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
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

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every parameter of `other` into `self`.
    pub fn extend(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Records every parameter on `tape`; `trainable(name)` decides which
    /// ones receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ParamVars {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), (tape.param(t, trainable(k)), trainable(k))))
            .collect();
        ParamVars { vars }
    }
}

/// Parameter handles on one tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, (Var, bool)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients of trainable parameters; untouched ones come back as zeros.
    pub fn collect_grads(&self, grads: &mut Gradients, store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter(|(_, (_, trainable))| *trainable)
            .map(|(name, (v, _))| {
                let g = grads.take(*v).unwrap_or_else(|| {
                    vec![0.0; store.get(name).map(Tensor::len).unwrap_or(0)]
                });
                (name.clone(), g)
            })
            .collect()
    }
}
