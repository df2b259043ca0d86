//! Minimal tensor library with reverse-mode automatic differentiation.
//!
//! Tensors hold contiguous row-major values (`f32` by default; `f64` is
//! available for the finite-difference oracle) and participate in a dynamic
//! tape: every kernel that sees a tracked input registers a backward rule,
//! and [`backward`] walks the tape in reverse topological order, accumulating
//! gradients across fan-out. The tape is confined to one thread by
//! construction (`Rc` handles), matching the single-worker training model.

mod gradcheck;
mod loss;
mod ops;
mod optim;

pub use gradcheck::{check_gradients, numeric_gradient, GradCheckReport};
pub use loss::{bce_with_logits, cross_entropy_masked};
pub use ops::{
    add, concat, dropout, embedding_lookup, gelu, layer_norm, matmul, mul, scale, slice, softmax,
    sum_all, transpose,
};
pub use optim::{adam_step, adamw_step, AdamHyper, OptimizerState};

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

/// Element type of a [`Tensor`]: `f32` in production, `f64` for oracles.
pub trait Scalar:
    Float + FromPrimitive + LinalgScalar + ScalarOperand + fmt::Display + fmt::Debug + 'static
{
    const DTYPE: &'static str;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}
impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Shorthand for converting literal constants into the active scalar type.
pub(crate) fn lit<S: Scalar>(x: f64) -> S {
    S::from_f64(x).expect("finite literal")
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: invalid axis {axis} for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}

pub type TensorResult<T> = Result<T, TensorError>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static DEBUG_CHECKS: Cell<bool> = const { Cell::new(false) };
}

/// Run `f` without recording backward rules (inference / frozen forward).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Toggle fail-fast NaN/Inf detection on kernel outputs and gradients.
pub fn set_debug_checks(on: bool) {
    DEBUG_CHECKS.with(|d| d.set(on));
}

pub(crate) fn debug_assert_finite<S: Scalar>(what: &str, a: &ArrayD<S>) {
    if DEBUG_CHECKS.with(|d| d.get()) && a.iter().any(|v| !v.is_finite()) {
        panic!("non-finite value detected in {what}");
    }
}

type BackwardFn<S> = Box<dyn Fn(&ArrayD<S>) -> Vec<Option<ArrayD<S>>>>;

struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    value: RefCell<ArrayD<S>>,
    grad: RefCell<Option<ArrayD<S>>>,
    requires_grad: bool,
    node: RefCell<Option<Node<S>>>,
}

/// An n-dimensional array participating in the gradient tape.
///
/// Cloning a `Tensor` clones the handle, not the buffer.
pub struct Tensor<S: Scalar = f32> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    fn new(value: ArrayD<S>, requires_grad: bool, node: Option<Node<S>>) -> Self {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad,
                node: RefCell::new(node),
            }),
        }
    }

    /// Constant leaf: no gradient is ever recorded for it.
    pub fn constant(value: ArrayD<S>) -> Self {
        Self::new(value, false, None)
    }

    /// Trainable leaf: `backward` populates its `grad`.
    pub fn param(value: ArrayD<S>) -> Self {
        Self::new(value, true, None)
    }

    pub fn scalar(x: S) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> TensorResult<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self::constant(
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("checked length"),
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub(crate) fn from_op(value: ArrayD<S>, parents: Vec<Tensor<S>>, backward: BackwardFn<S>) -> Self {
        debug_assert_finite("op output", &value);
        let tracked = grad_enabled() && parents.iter().any(|p| p.tracked());
        if tracked {
            Self::new(value, false, Some(Node { parents, backward }))
        } else {
            Self::new(value, false, None)
        }
    }

    fn tracked(&self) -> bool {
        self.inner.requires_grad || self.inner.node.borrow().is_some()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.inner.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> std::cell::Ref<'_, ArrayD<S>> {
        self.inner.value.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.value.borrow().iter().copied().collect()
    }

    /// Extract the single element of a scalar tensor.
    pub fn item(&self) -> S {
        let v = self.inner.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor {:?}", v.shape());
        *v.iter().next().expect("one element")
    }

    pub fn grad(&self) -> Option<ArrayD<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Replace the stored value in place (optimizer updates, checkpoint load).
    pub fn set_value(&self, value: ArrayD<S>) {
        assert_eq!(
            value.shape(),
            self.inner.value.borrow().shape(),
            "set_value must preserve shape"
        );
        *self.inner.value.borrow_mut() = value;
    }

    /// A constant copy sharing no tape history (used for cached embeddings).
    pub fn detach(&self) -> Tensor<S> {
        Tensor::constant(self.inner.value.borrow().clone())
    }

    fn accumulate_grad(&self, g: &ArrayD<S>) {
        debug_assert_finite("gradient", g);
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => *existing = &*existing + g,
            None => *slot = Some(g.clone()),
        }
    }
}

/// Reverse sweep from a scalar loss.
///
/// Populates `grad` (accumulating `+=`) on every `requires_grad` leaf
/// reachable from `loss`, then clears the visited tape nodes so the graph
/// memory is released and parameters can be stepped safely.
pub fn backward<S: Scalar>(loss: &Tensor<S>) -> TensorResult<()> {
    if loss.len() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape()));
    }

    // Post-order DFS over the tape; `order` ends parents-before-children.
    let mut order: Vec<Tensor<S>> = Vec::new();
    let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
    let mut stack: Vec<(Tensor<S>, bool)> = vec![(loss.clone(), false)];
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !visited.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        if let Some(node) = t.inner.node.borrow().as_ref() {
            for p in &node.parents {
                if p.tracked() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<u64, ArrayD<S>> = HashMap::new();
    grads.insert(
        loss.id(),
        ArrayD::from_elem(IxDyn(loss.shape().as_slice()), S::one()),
    );

    for t in order.iter().rev() {
        let out_grad = match grads.remove(&t.id()) {
            Some(g) => g,
            None => continue, // no gradient flowed here
        };
        if t.requires_grad() {
            t.accumulate_grad(&out_grad);
        }
        let node = t.inner.node.borrow_mut().take();
        if let Some(node) = node {
            let parent_grads = (node.backward)(&out_grad);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if p.tracked() {
                        debug_assert_finite("gradient", &g);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => *acc = &*acc + &g,
                            None => {
                                grads.insert(p.id(), g);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_of_sum_of_squares() {
        let x = Tensor::param(arr1(&[3.0_f32]).into_dyn());
        let y = sum_all(&mul(&x, &x).unwrap());
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap()[[0]], 6.0);
    }

    #[test]
    fn fanout_accumulates() {
        let x = Tensor::param(arr1(&[1.5_f32]).into_dyn());
        let y = sum_all(&add(&x, &x).unwrap());
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap()[[0]], 2.0);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::param(arr1(&[1.0_f32, 2.0]).into_dyn());
        let y = add(&x, &x).unwrap();
        assert!(matches!(backward(&y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn backward_clears_tape() {
        let x = Tensor::param(arr1(&[2.0_f32]).into_dyn());
        let y = mul(&x, &x).unwrap();
        let l = sum_all(&y);
        backward(&l).unwrap();
        assert!(y.inner.node.borrow().is_none());
        assert!(l.inner.node.borrow().is_none());
    }

    #[test]
    fn grad_accumulates_across_backward_calls() {
        let x = Tensor::param(arr1(&[3.0_f32]).into_dyn());
        for _ in 0..2 {
            let l = sum_all(&mul(&x, &x).unwrap());
            backward(&l).unwrap();
        }
        assert_eq!(x.grad().unwrap()[[0]], 12.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn no_grad_suppresses_tape() {
        let x = Tensor::param(arr1(&[2.0_f32]).into_dyn());
        let y = no_grad(|| mul(&x, &x).unwrap());
        assert!(y.inner.node.borrow().is_none());
    }

    #[test]
    #[should_panic(expected = "non-finite")]
    fn debug_checks_catch_nan() {
        set_debug_checks(true);
        let x = Tensor::constant(arr1(&[f32::NAN]).into_dyn());
        let y = Tensor::param(arr1(&[1.0_f32]).into_dyn());
        // mul output contains NaN and must fail fast
        let _ = mul(&x, &y).unwrap();
    }
}
