//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] owns a contiguous buffer plus shape and, when it
//! participates in differentiation, a node in a dynamically built acyclic
//! graph. Forward ops are pure; `backward` on a scalar root accumulates
//! gradients into every reachable gradient-tracking leaf, additively across
//! fan-out. Element precision is selectable between `f32` (training) and
//! `f64` (gradient verification).
//!
//! The op set is fixed and small so every backward rule stays auditable;
//! there is no broadcasting beyond bias adds and per-channel / per-position
//! scaling.

mod check;
mod conv;
mod ops;
mod pool;

pub use check::{finite_diff_check, DEFAULT_FD_EPS};
pub use conv::Padding;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Scalar element type of a tensor: `f32` or `f64`.
pub trait Element:
    num_traits::Float
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    const NAME: &'static str;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: `(output data, output gradient, parents)`. The rule
/// accumulates contributions into each parent via [`Tensor::accum_grad`].
pub(crate) type BackwardFn<E> = Box<dyn Fn(&[E], &[E], &[Tensor<E>])>;

struct Inner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<E>,
    /// True when this node participates in gradient computation, either as
    /// a declared parameter leaf or because some ancestor does.
    track: bool,
    grad: RefCell<Option<Vec<E>>>,
    parents: Vec<Tensor<E>>,
    backward_fn: Option<BackwardFn<E>>,
    backward_ran: Cell<bool>,
}

/// N-dimensional numeric array participating in a reverse-mode graph.
///
/// Cloning is cheap (reference-counted handle). Data is immutable once
/// created; only the gradient buffer mutates, during `backward`.
pub struct Tensor<E: Element> {
    inner: Rc<Inner<E>>,
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor<{}>(id={}, shape={:?}, track={})",
            E::NAME,
            self.inner.id,
            self.inner.shape,
            self.inner.track
        )
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Element> Tensor<E> {
    /// Plain data tensor (does not track gradients).
    pub fn new(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(format!(
                "tensor data length {} does not match shape {:?} (product {})",
                data.len(),
                shape,
                numel(shape)
            )));
        }
        Ok(Self::construct(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Gradient-tracking leaf (a trainable parameter or checked input).
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::new(data, shape)?;
        Ok(Self::construct(
            t.inner.data.clone(),
            t.inner.shape.clone(),
            true,
            Vec::new(),
            None,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::construct(vec![E::zero(); numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::construct(vec![value; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn scalar(value: E) -> Self {
        Self::construct(vec![value], vec![1], false, Vec::new(), None)
    }

    pub fn from_f64_slice(data: &[f64], shape: &[usize]) -> Result<Self> {
        Tensor::new(data.iter().map(|&x| E::from_f64(x)).collect(), shape)
    }

    fn construct(
        data: Vec<E>,
        shape: Vec<usize>,
        track: bool,
        parents: Vec<Tensor<E>>,
        backward_fn: Option<BackwardFn<E>>,
    ) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                track,
                grad: RefCell::new(None),
                parents,
                backward_fn,
                backward_ran: Cell::new(false),
            }),
        }
    }

    /// Graph-internal constructor for op outputs. When no parent tracks
    /// gradients the edges are dropped so inference builds no graph.
    pub(crate) fn from_op(
        data: Vec<E>,
        shape: Vec<usize>,
        parents: Vec<Tensor<E>>,
        backward_fn: BackwardFn<E>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        let track = parents.iter().any(|p| p.inner.track);
        if track {
            Self::construct(data, shape, true, parents, Some(backward_fn))
        } else {
            Self::construct(data, shape, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.inner.data
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.inner.data.clone()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.inner.data[0]
    }

    /// Whether this tensor participates in gradient computation.
    pub fn tracks_grad(&self) -> bool {
        self.inner.track
    }

    /// Current gradient, if `backward` has populated one.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate into this node's gradient buffer (no-op when untracked).
    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [E])) {
        if !self.inner.track {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![E::zero(); self.inner.data.len()]);
        f(buf);
    }

    /// Error if any element is NaN or infinite.
    pub fn assert_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.inner.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::numeric(format!(
                    "{context}: non-finite value {v} at flat index {i} (shape {:?})",
                    self.inner.shape
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn check_same_shape(&self, other: &Tensor<E>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Reverse-mode backward from a scalar root. Gradients accumulate
    /// additively across fan-out; leaves keep their buffers until
    /// `clear_grad`. A second call on the same root is an error.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar root, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.track {
            return Err(Error::numeric(
                "backward: no gradient-tracking leaf is reachable from this root".to_string(),
            ));
        }
        if self.inner.backward_ran.get() {
            return Err(Error::numeric(
                "backward already ran on this root without a gradient reset".to_string(),
            ));
        }
        self.inner.backward_ran.set(true);

        let order = topo_order(self);
        self.accum_grad(|g| g[0] = g[0] + E::one());
        for node in order.iter().rev() {
            let Some(rule) = &node.inner.backward_fn else { continue };
            let gref = node.inner.grad.borrow();
            if let Some(g) = gref.as_ref() {
                rule(&node.inner.data, g, &node.inner.parents);
            }
        }
        Ok(())
    }

    /// Detached copy: same data, no graph edges, no gradient tracking.
    pub fn detach(&self) -> Tensor<E> {
        Self::construct(self.inner.data.clone(), self.inner.shape.clone(), false, Vec::new(), None)
    }

    /// Cast to another element precision (detached).
    pub fn cast<T: Element>(&self) -> Tensor<T> {
        Tensor::construct(
            self.inner.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
            self.inner.shape.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Cast preserving leaf gradient tracking (for 64-bit re-verification).
    pub fn cast_param<T: Element>(&self) -> Tensor<T> {
        Tensor::construct(
            self.inner.data.iter().map(|&x| T::from_f64(x.to_f64())).collect(),
            self.inner.shape.clone(),
            true,
            Vec::new(),
            None,
        )
    }
}

/// Post-order over the gradient-tracking subgraph: parents precede children,
/// so the reversed order visits each node exactly once before its parents.
fn topo_order<E: Element>(root: &Tensor<E>) -> Vec<Tensor<E>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(root.clone(), 0)];
    visited.insert(root.id());
    while let Some((node, next_parent)) = stack.pop() {
        let parents = &node.inner.parents;
        if next_parent < parents.len() {
            let parent = parents[next_parent].clone();
            stack.push((node, next_parent + 1));
            if parent.inner.track && !visited.contains(&parent.id()) {
                visited.insert(parent.id());
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }
    order
}
