//! Dense f64 tensors with define-by-run reverse-mode differentiation.
//!
//! Every operation that touches a tensor requiring gradients records a node
//! holding its inputs; [`Tensor::backward`] walks that graph in reverse
//! topological order. Leaf gradients accumulate until [`Tensor::zero_grad`].
//!
//! Every forward and backward result is checked for NaN/Inf and the failing
//! op is named in the error.

mod kernels;
mod ops;

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use thiserror::Error;

pub use ops::Conv2dGeometry;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("{op}: invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("backward called on non-scalar tensor of shape {0:?}")]
    NonScalarBackward(Vec<usize>),
    #[error("non-finite value produced by {op} during {phase}")]
    NonFinite { op: &'static str, phase: &'static str },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any graph nodes on this thread.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// A recorded operation; inputs are held by the owning [`Node`].
pub(crate) struct Node {
    pub(crate) op: ops::Op,
    pub(crate) inputs: Vec<Tensor>,
}

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f64>>>,
    node: Option<Node>,
}

/// Cheaply clonable handle to an immutable n-dimensional array.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f64> = self.data().iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("data[..8]", &preview)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn check_finite(op: &'static str, phase: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op, phase })
    }
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// A trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Self {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape())
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Self {
        Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node: None,
        }))
    }

    /// Result of an op. Records a node only when some input needs gradients.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: ops::Op,
        inputs: Vec<Tensor>,
    ) -> Result<Self> {
        check_finite(op.name(), "forward", &data)?;
        let requires_grad = grad_enabled() && inputs.iter().any(|t| t.requires_grad());
        let node = requires_grad.then_some(Node { op, inputs });
        Ok(Tensor(Arc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: Mutex::new(None),
            node,
        })))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.0.data[0])
        } else {
            Err(TensorError::Invalid(format!(
                "item() on tensor of shape {:?}",
                self.shape()
            )))
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.data.clone(), self.0.shape.clone(), false)
    }

    /// Identity check used by the backward pass and by callers that need to
    /// know whether two handles share storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.0) as usize
    }

    /// Reverse-mode sweep from a scalar; accumulates into leaf `grad`s.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            match &t.0.node {
                None => {
                    if t.requires_grad() {
                        let mut slot = t.0.grad.lock().expect("grad lock poisoned");
                        match slot.as_mut() {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            None => *slot = Some(g),
                        }
                    }
                }
                Some(node) => {
                    let input_grads = node.op.backward(t, &node.inputs, &g)?;
                    for (input, ig) in node.inputs.iter().zip(input_grads) {
                        let Some(ig) = ig else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        check_finite(node.op.name(), "backward", &ig)?;
                        match grads.get_mut(&input.key()) {
                            Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(input.key(), ig);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order DFS; inputs always precede their consumers.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains(&input.key()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests;
