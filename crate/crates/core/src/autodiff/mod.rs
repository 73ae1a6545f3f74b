//! Reverse-mode automatic differentiation on dense n-d tensors.
//!
//! Graphs are built implicitly: every op produces a [`Tensor`] holding
//! handles to its parents plus a backward closure that maps the upstream
//! gradient to per-parent gradient contributions. [`Tensor::backward`]
//! walks the graph in reverse topological order and accumulates into the
//! `grad` slot of every node that requires gradients.
//!
//! Gradient accumulation is additive: calling `backward()` twice without
//! [`Tensor::zero_grad`] doubles the stored gradients. Nodes with
//! `requires_grad == false` never hold a gradient and keep no parent
//! links, so frozen subgraphs cost nothing beyond their forward pass.
//!
//! Element precision is generic: `f32` for training, `f64` for
//! finite-difference gradient checks (32-bit central differences are too
//! noisy for tight tolerances).

mod check;
mod ops;

pub use check::grad_check;
pub use ops::matmul_raw;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

/// Element precision tag, recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl Precision {
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn from_name(name: &str) -> Option<Precision> {
        match name {
            "f32" => Some(Precision::F32),
            "f64" => Some(Precision::F64),
            _ => None,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scalar element type of a tensor graph.
pub trait Element:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    /// One standard-normal draw from `rng`.
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
    /// One uniform draw in [0, 1).
    fn uniform01<R: rand::Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Element for f32 {
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f32, _>(rand_distr::StandardNormal)
    }
    fn uniform01<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Element for f64 {
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }
    fn uniform01<R: rand::Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Forward (train) vs. inference (eval) mode; only dropout cares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Maps the upstream gradient to one gradient buffer per parent.
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E]) -> Vec<Vec<E>>>;

pub(crate) struct Node<E> {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<E>,
    pub(crate) grad: Option<Vec<E>>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor<E>>,
    pub(crate) backward: Option<BackwardFn<E>>,
}

/// A dense n-dimensional value with an optional gradient slot.
///
/// `Tensor` is a cheap handle (`Rc`) onto shared node storage; clones
/// alias the same data and gradient. Graphs are thread-local: build and
/// differentiate a graph on one thread, and move values across threads
/// as plain `Vec<E>` via [`Tensor::data_vec`].
pub struct Tensor<E> {
    pub(crate) inner: Rc<RefCell<Node<E>>>,
}

impl<E> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    /// Leaf tensor from raw data; `product(shape)` must equal `data.len()`.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(shape),
                data.len()
            )));
        }
        Ok(Self::leaf(data, shape.to_vec()))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::leaf(vec![E::zero(); numel_of(shape)], shape.to_vec())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::leaf(vec![value; numel_of(shape)], shape.to_vec())
    }

    pub fn scalar(value: E) -> Self {
        Self::leaf(vec![value], vec![1])
    }

    /// Leaf with i.i.d. normal entries of the given standard deviation.
    pub fn randn<R: rand::Rng + ?Sized>(rng: &mut R, std: E, shape: &[usize]) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| E::std_normal(rng) * std)
            .collect();
        Self::leaf(data, shape.to_vec())
    }

    /// Normal init truncated to two standard deviations (resampled).
    pub fn trunc_randn<R: rand::Rng + ?Sized>(rng: &mut R, std: E, shape: &[usize]) -> Self {
        let two = E::from_f64(2.0);
        let data = (0..numel_of(shape))
            .map(|_| loop {
                let v = E::std_normal(rng);
                if v.abs() <= two {
                    break v * std;
                }
            })
            .collect();
        Self::leaf(data, shape.to_vec())
    }

    pub(crate) fn leaf(data: Vec<E>, shape: Vec<usize>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad: false,
                parents: Vec::new(),
                backward: None,
            })),
        }
    }

    /// Build an op node. Parent links and the backward closure are kept
    /// only when some parent requires gradients, so frozen computation
    /// carries no graph.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward: impl FnOnce() -> BackwardFn<E>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let (parents, backward) = if requires_grad {
            (parents, Some(backward()))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(RefCell::new(Node {
                shape,
                data,
                grad: None,
                requires_grad,
                parents,
                backward,
            })),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    /// Borrow the raw data slice.
    pub fn data(&self) -> Ref<'_, [E]> {
        Ref::map(self.inner.borrow(), |n| n.data.as_slice())
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.inner.borrow().data.clone()
    }

    /// Replace the stored data in place (same length required).
    pub fn set_data(&self, data: &[E]) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<E> {
        let n = self.inner.borrow();
        if n.data.len() != 1 {
            return Err(Error::dim(format!(
                "item() on tensor of {} elements",
                n.data.len()
            )));
        }
        Ok(n.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Mark a leaf as requiring (or not requiring) gradient accumulation.
    pub fn set_requires_grad(&self, requires: bool) {
        let mut n = self.inner.borrow_mut();
        n.requires_grad = requires;
        if !requires {
            n.grad = None;
        }
    }

    pub fn grad_vec(&self) -> Option<Vec<E>> {
        self.inner.borrow().grad.clone()
    }

    /// Drop any accumulated gradient.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// A gradient-free leaf copy of this tensor's current data.
    pub fn detach(&self) -> Tensor<E> {
        let n = self.inner.borrow();
        Self::leaf(n.data.clone(), n.shape.clone())
    }

    fn ptr(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// Accumulate `d L/d node` into every reachable node that requires
    /// gradients, seeding with 1 at this (scalar) output.
    ///
    /// Gradients add onto whatever is already stored; call
    /// [`Tensor::zero_grad`] between steps.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::dim(format!(
                "backward() requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();

        // Per-call upstream buffers; final sums land in the grad slots so
        // repeated backward calls accumulate additively.
        let mut upstream: HashMap<usize, Vec<E>> = HashMap::new();
        upstream.insert(self.ptr(), vec![E::one()]);

        for node in order.iter().rev() {
            let up = match upstream.remove(&node.ptr()) {
                Some(u) => u,
                None => continue, // unreachable from the seed
            };
            {
                let inner = node.inner.borrow();
                if let Some(backward) = &inner.backward {
                    let contributions = backward(&up);
                    debug_assert_eq!(contributions.len(), inner.parents.len());
                    for (parent, contrib) in inner.parents.iter().zip(contributions) {
                        if !parent.requires_grad() {
                            continue;
                        }
                        let buf = upstream
                            .entry(parent.ptr())
                            .or_insert_with(|| vec![E::zero(); contrib.len()]);
                        for (b, c) in buf.iter_mut().zip(&contrib) {
                            *b += *c;
                        }
                    }
                }
            }
            let mut inner = node.inner.borrow_mut();
            let grad = inner.grad.get_or_insert_with(|| vec![E::zero(); up.len()]);
            for (g, u) in grad.iter_mut().zip(&up) {
                *g += *u;
            }
        }
        Ok(())
    }

    /// Post-order DFS over the requires-grad subgraph.
    fn topo_order(&self) -> Vec<Tensor<E>> {
        let mut order: Vec<Tensor<E>> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        // (node, next child index) stack; iterative to survive deep graphs
        let mut stack: Vec<(Tensor<E>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.ptr(), ());
        while let Some((node, child_idx)) = stack.pop() {
            let next_child = {
                let inner = node.inner.borrow();
                inner
                    .parents
                    .iter()
                    .enumerate()
                    .skip(child_idx)
                    .find(|(_, p)| p.requires_grad() && !visited.contains_key(&p.ptr()))
                    .map(|(i, p)| (i, p.clone()))
            };
            match next_child {
                Some((i, child)) => {
                    visited.insert(child.ptr(), ());
                    stack.push((node, i + 1));
                    stack.push((child, 0));
                }
                None => order.push(node),
            }
        }
        order
    }
}

/// A named, possibly trainable leaf tensor.
///
/// `trainable == false` means the optimizer never touches the data and
/// backward never accumulates a gradient (the tensor's `requires_grad`
/// is the single source of truth). The name is a unique path used for
/// checkpointing and diagnostics.
pub struct Parameter<E> {
    tensor: Tensor<E>,
    name: String,
}

impl<E> Clone for Parameter<E> {
    fn clone(&self) -> Self {
        Parameter {
            tensor: self.tensor.clone(),
            name: self.name.clone(),
        }
    }
}

impl<E: Element> Parameter<E> {
    pub fn new(name: impl Into<String>, tensor: Tensor<E>, trainable: bool) -> Self {
        tensor.set_requires_grad(trainable);
        Parameter {
            tensor,
            name: name.into(),
        }
    }

    pub fn tensor(&self) -> &Tensor<E> {
        &self.tensor
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.tensor.set_requires_grad(trainable);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_shape_mismatch() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
        assert!(Tensor::<f64>::from_vec(vec![1.0; 4], &[2, 2]).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        t.set_requires_grad(true);
        assert!(t.backward().is_err());
    }

    #[test]
    fn backward_twice_accumulates_additively() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        x.set_requires_grad(true);
        let y = x.sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);
        y.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![2.0, 2.0, 2.0]);
        x.zero_grad();
        y.backward().unwrap();
        assert_eq!(x.grad_vec().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn no_grad_for_untracked_leaves() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = Tensor::<f64>::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        y.set_requires_grad(true);
        let z = x.mul(&y).unwrap().sum_all();
        z.backward().unwrap();
        assert!(x.grad_vec().is_none());
        assert_eq!(y.grad_vec().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        // f(x) = x*x + x  =>  f'(x) = 2x + 1
        let x = Tensor::<f64>::scalar(3.0);
        x.set_requires_grad(true);
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(y.item().unwrap(), 12.0);
        assert_eq!(x.grad_vec().unwrap(), vec![7.0]);
    }

    #[test]
    fn frozen_subgraph_keeps_no_parents() {
        let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.scale(2.0);
        assert!(!y.requires_grad());
        assert!(y.inner.borrow().parents.is_empty());
        assert!(y.inner.borrow().backward.is_none());
    }

    #[test]
    fn parameter_trainable_controls_requires_grad() {
        let p = Parameter::new("w", Tensor::<f64>::zeros(&[2, 2]), true);
        assert!(p.trainable());
        p.set_trainable(false);
        assert!(!p.trainable());
        assert!(!p.tensor().requires_grad());
    }
}
