use std::collections::BTreeMap;

use super::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named tensor owned by a model. Frozen parameters never carry a
/// gradient buffer and are skipped by the optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.tensor.set_requires_grad(!frozen);
    }

    /// Swaps in a new value, dropping any gradient buffer.
    pub fn replace_tensor(&mut self, tensor: Tensor<T>) {
        self.tensor = tensor;
        self.tensor.set_requires_grad(false);
        self.tensor.set_requires_grad(!self.frozen);
    }
}

/// Registry of every parameter of a model, addressed by stable name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Consistency(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        let mut p = Parameter {
            name,
            tensor,
            frozen,
        };
        p.set_frozen(frozen);
        self.params.push(p);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids sorted by parameter name.
    pub fn ids_by_name(&self) -> Vec<ParamId> {
        self.by_name.values().map(|&i| ParamId(i)).collect()
    }

    /// Non-frozen parameter ids, sorted by name.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.by_name
            .values()
            .filter(|&&i| !self.params[i].frozen)
            .map(|&i| ParamId(i))
            .collect()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Adds the leaf gradients a graph holds for this store's parameters.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, grad) in graph.param_grads() {
            self.params[id.0].tensor.accumulate_grad(grad);
        }
    }

    /// Freezes or unfreezes every parameter whose name starts with `prefix`.
    /// Returns how many were touched.
    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.set_frozen(frozen);
                n += 1;
            }
        }
        n
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
