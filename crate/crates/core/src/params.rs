//! Named parameter storage and per-tape binding.

use std::cell::RefCell;
use std::collections::BTreeMap;

use crate::autodiff::{Scalar, Tape, Tensor, Var};

/// Index of a parameter in its [`ParamSet`], in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let grad = vec![T::zero(); value.len()];
        self.params.push(Param { name: name.into(), value, grad, decay });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds gradients collected from a [`Session`].
    pub fn accumulate(&mut self, grads: Vec<(ParamId, Vec<T>)>) {
        for (id, g) in grads {
            let p = &mut self.params[id.0];
            p.grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

/// A tape plus the lazily created leaves for the parameters it touches.
/// Parameters that a forward pass never reads are never bound, so they
/// receive no gradient at all.
pub struct Session<'p, T: Scalar> {
    tape: Tape<T>,
    params: &'p ParamSet<T>,
    bound: RefCell<BTreeMap<ParamId, Var>>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self { tape: Tape::new(), params, bound: RefCell::new(BTreeMap::new()) }
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Var {
        *self
            .bound
            .borrow_mut()
            .entry(id)
            .or_insert_with(|| self.tape.leaf(self.params.get(id).value.clone()))
    }

    pub fn bound_ids(&self) -> Vec<ParamId> {
        self.bound.borrow().keys().copied().collect()
    }

    /// Gradients of every bound parameter after `backward`.
    pub fn grads(&self) -> Vec<(ParamId, Vec<T>)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(&id, &v)| self.tape.grad(v).map(|g| (id, g)))
            .collect()
    }
}
