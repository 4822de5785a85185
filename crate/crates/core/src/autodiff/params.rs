//! Named trainable arrays with gradient and optimizer-moment slots.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Value;
use std::collections::HashMap;

/// One trainable array. `grad` always has the same shape as `value`;
/// `m1`/`m2` hold Adam moment state and persist across steps.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Value<T>,
    pub grad: Value<T>,
    pub m1: Value<T>,
    pub m2: Value<T>,
}

/// Flat collection of named trainable arrays. Insertion order is fixed and
/// reproducible; gradient reductions and checkpoint layout both use it.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Value<T>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name: {name}")));
        }
        let grad = value.zeros_like();
        let m1 = value.zeros_like();
        let m2 = value.zeros_like();
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), value, grad, m1, m2 });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter: {name}")))
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<T> {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut ParamEntry<T> {
        &mut self.entries[id]
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        Ok(self.entry(self.index_of(name)?))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        let id = self.index_of(name)?;
        Ok(self.entry_mut(id))
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad = e.value.zeros_like();
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn n_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Accumulate a gradient collection into the grad slots, in parameter
    /// index order.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.iter() {
            self.entries[id].grad.add_assign(g)?;
        }
        Ok(())
    }

    /// L2 norm over all gradient slots.
    pub fn grad_norm(&self) -> T {
        let ss: T = self
            .entries
            .iter()
            .map(|e| {
                let n = e.grad.norm();
                n * n
            })
            .sum();
        ss.sqrt()
    }

    /// Add `delta` to one scalar element of one parameter (finite differences).
    pub fn nudge(&mut self, id: usize, elem: usize, delta: T) {
        let e = &mut self.entries[id];
        match &mut e.value {
            Value::Scalar(s) => *s = *s + delta,
            Value::Vector(v) => v[elem] = v[elem] + delta,
            Value::Matrix(m) => {
                let ncols = m.ncols();
                m[(elem / ncols, elem % ncols)] = m[(elem / ncols, elem % ncols)] + delta;
            }
        }
    }
}

/// Per-parameter gradients produced by one backward pass. Entries are `None`
/// for parameters the tape never touched.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    slots: Vec<Option<Value<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(n_params: usize) -> Self {
        Gradients { slots: vec![None; n_params] }
    }

    pub fn add(&mut self, id: usize, g: &Value<T>) -> Result<()> {
        match &mut self.slots[id] {
            Some(acc) => acc.add_assign(g)?,
            slot @ None => *slot = Some(g.clone()),
        }
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&Value<T>> {
        self.slots.get(id).and_then(|s| s.as_ref())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Value<T>)> {
        self.slots.iter().enumerate().filter_map(|(i, s)| s.as_ref().map(|v| (i, v)))
    }

    /// Fold another gradient collection into this one (fixed, by-index order).
    pub fn merge(&mut self, other: &Gradients<T>) -> Result<()> {
        for (id, g) in other.iter() {
            self.add(id, g)?;
        }
        Ok(())
    }
}
