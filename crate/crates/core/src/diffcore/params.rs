use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    pub trainable: bool,
}

/// Index of a parameter inside its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, uniquely named parameter collection.
///
/// Ids are positional, so appending parameters never invalidates the ids of
/// existing ones.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array) -> Result<ParamId> {
        self.insert(Parameter {
            name: name.into(),
            value,
            trainable: true,
        })
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.id(&param.name).is_some() {
            return Err(Error::invalid(format!(
                "duplicate parameter name {:?}",
                param.name
            )));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Keeps the first `n` parameters.
    pub fn truncate(&mut self, n: usize) {
        self.params.truncate(n);
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// `θ ← θ − lr·g` for every trainable parameter with a gradient.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.get(ParamId(i)) {
                p.value.axpy(-lr, g);
            }
        }
    }
}

/// Gradients keyed by [`ParamId`]; parameters without a gradient are `None`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn set(&mut self, id: ParamId, grad: Array) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    /// Drops every gradient with id `>= n`.
    pub fn truncate(&mut self, n: usize) {
        self.grads.truncate(n);
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(id.0).and_then(Option::as_mut) {
                Some(acc) => acc.axpy(1.0, g),
                None => self.set(id, g.clone()),
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.iter().map(|(_, g)| g.max_abs()).fold(0.0, f64::max)
    }
}
