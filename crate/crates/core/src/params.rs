//! Named parameter storage and per-pass binding onto a tape.

use std::collections::BTreeMap;

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by their checkpoint name. Iteration order is the
/// lexicographic name order, which keeps every traversal deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

pub type Grads = BTreeMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(
            name.into(),
            Param {
                value,
                trainable: false,
            },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.params
            .get_mut(name)
            .map(|p| p.trainable = trainable)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.trainable = false;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|n, _| !n.starts_with(prefix));
    }
}

/// Lazily places parameters on a tape for one forward pass.
///
/// Trainable parameters become gradient-carrying leaves unless the binder
/// was created with [`Binder::frozen`], which is what inference uses.
pub struct Binder<'a> {
    store: &'a ParamStore,
    vars: BTreeMap<&'a str, Var>,
    track: bool,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            track: true,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            track: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, param) = self
            .store
            .params
            .get_key_value(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))?;
        let v = tape.leaf(param.value.clone(), self.track && param.trainable);
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Gradients of every bound trainable parameter that backward reached.
    pub fn grads(&self, tape: &Tape) -> Grads {
        self.vars
            .iter()
            .filter(|(_, &v)| tape.requires_grad(v))
            .filter_map(|(&n, &v)| tape.grad(v).map(|g| (n.to_string(), g)))
            .collect()
    }
}
