use std::sync::Arc;

use indexmap::IndexSet;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{LasError, Result};

/// Ordered collection of named parameter tensors.
///
/// Insertion order is stable and defines the serialization order.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar> {
    names: Arc<IndexSet<String>>,
    values: Vec<Arc<Tensor<T>>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Arc::new(IndexSet::new()),
            values: Vec::new(),
        }
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        let name = name.into();
        match self.names.get_index_of(&name) {
            Some(i) => self.values[i] = Arc::new(value),
            None => {
                Arc::make_mut(&mut self.names).insert(name);
                self.values.push(Arc::new(value));
            }
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index_of(name).map(|i| self.values[i].as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = self.index_of(name)?;
        Ok(Arc::make_mut(&mut self.values[i]))
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .get_index_of(name)
            .ok_or_else(|| LasError::MissingParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut().map(Arc::make_mut)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: Arc::clone(&self.names),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Result<BoundParams<'t, T>> {
        let vars = self
            .values
            .iter()
            .map(|v| tape.leaf(Arc::clone(v), trainable))
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundParams {
            names: Arc::clone(&self.names),
            vars,
        })
    }

    /// `θ ← θ − lr · g` for gradients in store order.
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(LasError::Dimension {
                op: "sgd_step",
                lhs: vec![self.values.len()],
                rhs: vec![grads.len()],
            });
        }
        let lr = T::cast(lr);
        for (p, g) in self.values.iter_mut().zip(grads) {
            let p = Arc::make_mut(p);
            if p.shape() != g.shape() {
                return Err(LasError::Dimension {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w = *w - lr * *d;
            }
        }
        Ok(())
    }
}

/// A [`ParamStore`] registered on one tape.
pub struct BoundParams<'t, T: Scalar> {
    names: Arc<IndexSet<String>>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn get(&self, name: &str) -> Result<Var<'t, T>> {
        self.names
            .get_index_of(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| LasError::MissingParam(name.to_string()))
    }

    /// Gradients in store order, zero-filled for unused parameters.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }
}

/// Anything that can hand out parameter variables by name.
pub trait ParamSource<'t, T: Scalar> {
    fn var(&self, name: &str) -> Result<Var<'t, T>>;
}

impl<'t, T: Scalar> ParamSource<'t, T> for BoundParams<'t, T> {
    fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.get(name)
    }
}

/// Registers non-trainable leaves on demand, for inference passes that touch
/// only part of a store.
pub struct LazyParams<'t, 'p, T: Scalar> {
    pub tape: &'t Tape<T>,
    pub store: &'p ParamStore<T>,
}

impl<'t, T: Scalar> ParamSource<'t, T> for LazyParams<'t, '_, T> {
    fn var(&self, name: &str) -> Result<Var<'t, T>> {
        let i = self.store.index_of(name)?;
        self.tape.leaf(Arc::clone(&self.store.values[i]), false)
    }
}

/// Parallel name and variable slices, e.g. the inputs of a gradient check.
pub struct NamedVars<'a, 't, T: Scalar> {
    pub names: &'a [String],
    pub vars: &'a [Var<'t, T>],
}

impl<'t, T: Scalar> ParamSource<'t, T> for NamedVars<'_, 't, T> {
    fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .and_then(|i| self.vars.get(i).copied())
            .ok_or_else(|| LasError::MissingParam(name.to_string()))
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::squared_norm).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::cast(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}
