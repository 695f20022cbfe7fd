use std::collections::HashMap;

use super::tensor::Tensor3;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter arrays in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor3>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor3) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor3 {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor3 {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor3> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor3)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total scalar count over all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor3::len).sum()
    }
}

/// Gradient arrays aligned with a [`ParamStore`]; parameters that did not take
/// part in the loss keep an all-zero gradient.
#[derive(Clone, Debug)]
pub struct Grads {
    values: Vec<Tensor3>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            values: store
                .values
                .iter()
                .map(|t| {
                    let (b, s, d) = t.shape();
                    Tensor3::zeros(b, s, d)
                })
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor3 {
        &self.values[id.0]
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &Tensor3) {
        let slot = &mut self.values[id.0];
        debug_assert!(slot.same_shape(grad));
        for (a, g) in slot.data_mut().iter_mut().zip(grad.data()) {
            *a += g;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor3)> {
        self.values.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.values {
            for v in t.data_mut() {
                *v *= factor;
            }
        }
    }
}
