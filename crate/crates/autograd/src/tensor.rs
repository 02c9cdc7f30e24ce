use std::cell::Cell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::error::Result;

/// Dense f64 array with dynamic rank, the storage type behind every [`Tensor`].
pub type Array = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Returns whether operations currently record a graph on this thread.
pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Guard that disables graph recording until dropped.
#[must_use = "graph recording resumes as soon as the guard is dropped"]
pub struct GradModeGuard {
    prev: bool,
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.prev));
    }
}

pub(crate) fn set_grad_enabled(enabled: bool) -> GradModeGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(enabled));
    GradModeGuard { prev }
}

/// Disable graph recording for the lifetime of the returned guard.
pub fn no_grad() -> GradModeGuard {
    set_grad_enabled(false)
}

/// Re-enable graph recording, e.g. for an inner gradient inside a
/// [`no_grad`] region.
pub fn enable_grad() -> GradModeGuard {
    set_grad_enabled(true)
}

/// Backward rule of a recorded operation.
///
/// Rules written in terms of [`Tensor`] operations are themselves
/// differentiable, which is what makes gradients of gradients work. Rules that
/// drop to raw array kernels must report `higher_order() == false`.
pub(crate) trait Backward {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[Tensor], output: &Tensor, grad: &Tensor)
        -> Result<Vec<Option<Tensor>>>;

    fn higher_order(&self) -> bool {
        true
    }
}

pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) value: Array,
    pub(crate) requires_grad: bool,
    pub(crate) grad_fn: Option<Box<dyn Backward>>,
    pub(crate) inputs: Vec<Tensor>,
}

/// Reference-counted node in a dynamically recorded computation graph.
#[derive(Clone)]
pub struct Tensor(pub(crate) Rc<Node>);

impl Tensor {
    fn make(value: Array, requires_grad: bool, grad_fn: Option<Box<dyn Backward>>, inputs: Vec<Tensor>) -> Self {
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
            inputs,
        }))
    }

    /// A tensor that never receives gradient.
    pub fn constant(value: Array) -> Self {
        Self::make(value, false, None, Vec::new())
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn leaf(value: Array) -> Self {
        Self::make(value, true, None, Vec::new())
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::constant(ArrayD::ones(IxDyn(shape)))
    }

    /// Builds a constant from row-major data.
    ///
    /// Panics when `data.len()` does not match the shape.
    #[track_caller]
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("data length must match shape");
        Self::constant(value)
    }

    /// Records `value` as the output of `op` applied to `inputs` when any
    /// input requires grad and recording is enabled.
    pub(crate) fn from_op(value: Array, inputs: Vec<Tensor>, op: impl Backward + 'static) -> Self {
        if is_grad_enabled() && inputs.iter().any(Tensor::requires_grad) {
            Self::make(value, true, Some(Box::new(op)), inputs)
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.0.value.clone())
    }

    /// The single element of a one-element tensor.
    #[track_caller]
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().unwrap()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.value.iter().copied().collect()
    }

    /// Name of the operation that produced this tensor, if any.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|f| f.name())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .finish()
    }
}
