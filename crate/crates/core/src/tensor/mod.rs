//! Dense `f64` tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable value: a shape, a shared data buffer and an
//! optional link into a differentiation graph. Operations on tensors that
//! carry a link record a new graph node; operations on plain tensors do not.
//!
//! Every derivative rule is written in terms of the same differentiable
//! operations, so a backward pass run with `build_higher = true` produces
//! gradients that are themselves graph-linked and can be differentiated
//! again (double backprop).

mod autograd;
mod finite_diff;
pub(crate) mod kernels;
pub(crate) mod ops;

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub use autograd::backward;
pub use finite_diff::{finite_diff_gradient, max_relative_error, relative_error};
pub use ops::conv2d;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} values but {actual} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

/// Operation tag plus the attributes its derivative rule needs.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    /// `parents[0] * parents[1]` where the second parent is a scalar.
    Scale,
    MulConst(f64),
    AddConst(f64),
    Relu,
    Sigmoid,
    Exp,
    Ln,
    Powf(f64),
    Sum,
    Expand,
    Dot,
    Reshape,
    MaxAll { index: usize },
    Conv2d { stride: usize, padding: usize },
    ConvInputGrad { stride: usize, padding: usize },
    ConvKernelGrad { stride: usize, padding: usize },
    ChannelSum,
    ChannelExpand,
    MatVec,
    MatTVec,
    Outer,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale => "scale",
            Op::MulConst(_) => "mul_const",
            Op::AddConst(_) => "add_const",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Powf(_) => "powf",
            Op::Sum => "sum",
            Op::Expand => "expand",
            Op::Dot => "dot",
            Op::Reshape => "reshape",
            Op::MaxAll { .. } => "max_all",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvKernelGrad { .. } => "conv2d_kernel_grad",
            Op::ChannelSum => "channel_sum",
            Op::ChannelExpand => "channel_expand",
            Op::MatVec => "matvec",
            Op::MatTVec => "mattvec",
            Op::Outer => "outer",
        }
    }
}

/// A node in the differentiation graph. Nodes are immutable once built; the
/// parent tensors keep their own nodes alive, so a graph lives exactly as
/// long as some tensor still refers into it.
pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: Op,
    pub(crate) parents: Vec<Tensor>,
}

#[derive(Clone)]
pub struct Tensor {
    shape: Arc<[usize]>,
    data: Arc<[f64]>,
    node: Option<Arc<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("op", &self.node.as_ref().map(|n| n.op.name()))
            .finish()
    }
}

impl PartialEq for Tensor {
    /// Value equality; graph links are ignored.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self::plain(shape.to_vec(), data))
    }

    pub(crate) fn plain(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape: shape.into(),
            data: data.into(),
            node: None,
        }
    }

    pub fn from_slice(data: &[f64]) -> Self {
        Self::plain(vec![data.len()], data.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Self::plain(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::plain(shape.to_vec(), vec![value; n])
    }

    /// A fresh graph leaf holding the same values. Gradients can be taken
    /// with respect to the returned tensor.
    pub fn variable(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                op: Op::Leaf,
                parents: Vec::new(),
            })),
        }
    }

    /// Same values, no graph link.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// True when this tensor is linked into a differentiation graph.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node>> {
        self.node.as_ref()
    }

    pub(crate) fn node_id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    /// Builds the result of an operation, recording a node when any parent is
    /// graph-linked.
    pub(crate) fn from_op(op: Op, parents: &[&Tensor], shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let node = if parents.iter().any(|p| p.node.is_some()) {
            Some(Arc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                op,
                parents: parents.iter().map(|p| (*p).clone()).collect(),
            }))
        } else {
            None
        };
        Ok(Tensor {
            shape: shape.into(),
            data: data.into(),
            node,
        })
    }
}
