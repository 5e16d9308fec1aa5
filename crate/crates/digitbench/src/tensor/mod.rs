//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: every operation appends a node to a [`Tape`],
//! a fresh tape is built for each forward pass, and [`Tensor::backward`]
//! sweeps the recorded nodes once in reverse order. When a value feeds
//! several consumers its gradient contributions accumulate additively.
//!
//! A [`Tensor`] is a cheap handle (tape pointer + node index); the data
//! lives in the tape arena and is freed when the tape is dropped. Tapes and
//! their tensors are confined to a single thread; independent tapes may run
//! on different threads concurrently.

pub mod context;
mod gemm;
mod gradcheck;
mod ops;

pub use context::{Forward, MaskPolicy, Param, ParamId, ParamSet, Phase};
pub use gradcheck::{finite_diff_gradcheck, GradMode, GradOutcome};
pub(crate) use ops::Op;

use std::cell::RefCell;
use std::rc::Rc;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul: inner dimensions disagree: {lhs:?} x {rhs:?}")]
    InnerDimMismatch { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss is detached (no gradient-tracked input reaches it)")]
    DetachedLoss,
    #[error("{0} produced a non-finite value")]
    NonFinite(String),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Recording arena for one forward/backward pass.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Enters an input tensor. `requires_grad` marks it as a differentiation
    /// root; its gradient is kept after `backward`.
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "leaf: shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite("leaf".into()));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        self.push(vec![0.0; numel], shape.to_vec(), false, Op::Leaf)
    }

    pub(crate) fn push(
        &self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> Tensor {
        #[cfg(debug_assertions)]
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value recorded on tape"
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        inner.grads.push(None);
        Tensor {
            tape: self.clone(),
            id,
        }
    }
}

/// Handle to one value recorded on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    id: usize,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.tape.inner.borrow().nodes[self.id].data.clone()
    }

    /// Reads the underlying buffer without copying.
    pub fn with_data<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].data)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let inner = self.tape.inner.borrow();
        let n = &inner.nodes[self.id];
        assert_eq!(n.data.len(), 1, "item() on non-scalar tensor");
        n.data[0]
    }

    /// Gradient accumulated by the latest `backward`, if this tensor was a
    /// tracked leaf on the path to the loss.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Re-enters this tensor's data as a fresh constant leaf, cutting the
    /// gradient path.
    pub fn detach(&self) -> Tensor {
        let (data, shape) = {
            let inner = self.tape.inner.borrow();
            let n = &inner.nodes[self.id];
            (n.data.clone(), n.shape.clone())
        };
        self.tape.push(data, shape, false, Op::Leaf)
    }

    pub(crate) fn same_tape(&self, other: &Tensor) -> Tape {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "operation on tensors from different tapes"
        );
        self.tape.clone()
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// gradients of intermediate nodes are released as soon as they have
    /// been propagated, leaf gradients are kept for retrieval via `grad`.
    pub fn backward(&self) -> Result<()> {
        let mut inner = self.tape.inner.borrow_mut();
        {
            let n = &inner.nodes[self.id];
            if n.data.len() != 1 {
                return Err(TensorError::NonScalarLoss(n.shape.clone()));
            }
            if !n.requires_grad {
                return Err(TensorError::DetachedLoss);
            }
        }
        for g in inner.grads.iter_mut() {
            *g = None;
        }
        inner.grads[self.id] = Some(vec![1.0]);
        for id in (0..=self.id).rev() {
            if !inner.nodes[id].requires_grad {
                inner.grads[id] = None;
                continue;
            }
            let Some(g) = inner.grads[id].take() else {
                continue;
            };
            ops::backward_node(&mut inner, id, &g);
            if matches!(inner.nodes[id].op, Op::Leaf) {
                inner.grads[id] = Some(g);
            }
        }
        Ok(())
    }
}
