//! Dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its arrays in forward
//! execution order. Arrays are addressed by [`Var`] handles, which are plain
//! indices into the tape. Calling [`Tape::backward`] on a scalar walks the
//! record in exact reverse order and accumulates gradients into every leaf
//! created with `requires_grad`.
//!
//! Leaf gradients accumulate across backward calls until [`Tape::zero_grads`]
//! is called. Intermediate gradients are rebuilt on every call, so two
//! backward passes produce exactly twice the gradient of one.
//!
//! The element type is generic: training runs in `f32`, gradient checks in
//! `f64`.

mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use gradcheck::{finite_difference_check, grad_check, GradCheckReport};

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};
use kernels::numel;

/// Floating-point element type usable on a tape.
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn cast(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// An owned dense array outside of any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                detail: format!("shape {shape:?} holds {} elements, got {}", numel(&shape), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![T::zero(); n] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::cast(v)).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to an array recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }

    pub fn tape_id(self) -> u64 {
        self.tape
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, T),
    Sigmoid(usize),
    Silu(usize),
    Map { input: usize, derivative: fn(T) -> T },
    MatMul(usize, usize),
    Softmax { input: usize, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, ignore: usize, count: usize },
    SumAll(usize),
    SumAxis { input: usize, axis: usize },
    Reshape(usize),
    Permute { input: usize, perm: Vec<usize> },
    GatherRows { input: usize, rows: Vec<usize> },
    ConcatRows(Vec<usize>),
    Dropout { input: usize, mask: Vec<T> },
    MaskedFill { input: usize, mask: Vec<bool> },
    RmsNormalize { input: usize, eps: T },
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Ordered record of a forward computation.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
    leaf_grads: RefCell<HashMap<usize, Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(HashMap::new()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of recorded arrays.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::Input(format!(
                "array {} belongs to tape {}, not tape {}",
                v.index, v.tape, self.id
            )));
        }
        Ok(v.index)
    }

    pub(crate) fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { shape, value, op, requires_grad });
        Var { index: nodes.len() - 1, tape: self.id }
    }

    /// A trainable leaf. Its gradient is available through [`Tape::grad`].
    pub fn leaf(&self, tensor: Tensor<T>) -> Var {
        self.push(tensor.shape, tensor.data, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, tensor: Tensor<T>) -> Var {
        self.push(tensor.shape, tensor.data, Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// Same values as `x`, with no tape edge back to it.
    pub fn constant_view(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let (shape, value) = {
            let nodes = self.nodes.borrow();
            (nodes[i].shape.clone(), nodes[i].value.clone())
        };
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index].shape.clone()
    }

    pub fn value(&self, v: Var) -> Vec<T> {
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor { shape: nodes[v.index].shape.clone(), data: nodes[v.index].value.clone() }
    }

    /// Runs `f` against the values of `v` without copying them.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.nodes.borrow()[v.index].value)
    }

    /// Value of a single-element array.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[self.check(v)?];
        if node.value.len() != 1 {
            return Err(Error::Shape { op: "scalar", detail: format!("shape {:?} is not scalar", node.shape) });
        }
        Ok(node.value[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.index].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Vec<T>> {
        self.leaf_grads.borrow().get(&v.index).cloned()
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    /// Propagates d(loss)/d(leaf) into every reachable trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let root = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[root].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", nodes[root].shape),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root + 1, || None);
        grads[root] = Some(vec![T::one()]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            ops::backward_rule(&nodes, i, &g, &mut |j, contrib: Vec<T>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            });
        }
        Ok(())
    }
}
