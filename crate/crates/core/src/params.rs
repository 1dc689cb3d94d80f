//! Named trainable parameters and their gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        self.add_with(name, value, true)
    }

    /// Register a tensor that is bound like a parameter but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        self.add_with(name, value, false)
    }

    fn add_with(&mut self, name: impl Into<String>, value: Tensor<F>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<F>)> {
        self.ids()
            .zip(&self.names)
            .zip(&self.values)
            .map(|((id, n), v)| (id, n.as_str(), v))
    }

    /// Total scalar count of trainable parameters.
    pub fn num_trainable(&self) -> usize {
        self.iter()
            .filter(|(id, _, _)| self.is_trainable(*id))
            .map(|(_, _, v)| v.numel())
            .sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.cast()).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values from named tensors; every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<F>)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor<F>> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.values.len() {
            let name = &self.names[i];
            let t = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::shape(format!(
                    "checkpoint {name}: {:?} vs model {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = (*t).clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor<F>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.bit_eq(b))
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    /// Add every parameter gradient recorded on `graph`.
    pub fn accumulate_graph(&mut self, graph: &Graph<F>) {
        for (id, g) in graph.param_grads() {
            self.accumulate(id, g);
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<F>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Sum another gradient set into this one.
    pub fn merge(&mut self, other: &Gradients<F>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        let c = F::of(c);
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| Some((ParamId(i), g.as_ref()?)))
    }
}
