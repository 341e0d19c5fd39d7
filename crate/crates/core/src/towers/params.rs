use indexmap::IndexMap;

use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Ordered table of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    map: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for Params<T> {
    fn default() -> Self {
        Params { map: IndexMap::new() }
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count over all tensors.
    pub fn count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Records every parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound { vars: self.map.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad))).collect() }
    }
}

/// Parameter name to tape variable, produced by [`Params::bind`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Rebinds `name` to another variable.
    pub fn with(mut self, name: &str, v: Var) -> Self {
        self.vars.insert(name.to_string(), v);
        self
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after backward, keyed by parameter name; unreached parameters get zeros.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> IndexMap<String, Tensor<T>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (k.clone(), g)
            })
            .collect()
    }
}
