//! Dense tensor values and reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major buffers with a shape of up to five extents
//! (interpreted by convention as batch, time, channel, height, width, with
//! leading axes omitted when unused). Differentiable operations live on
//! [`Tape`]; the tape is rebuilt for every training step (define-by-run),
//! and [`Tape::backward`] replays it in reverse to populate gradients.
//!
//! Forward/training code runs in single precision (`Tensor<f32>`); the
//! finite-difference gradient checker instantiates the same operations in
//! double precision so the checker itself stays trustworthy.

mod ops;
mod tape;

pub use ops::bilinear_sample;
pub use tape::{Gradients, NodeId, Tape};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Maximum tensor rank.
pub const MAX_RANK: usize = 5;

/// Scalar element type of a tensor: `f32` for forward/training, `f64` for
/// gradient checking.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Convert a compile-time constant.
    fn c(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32(self) -> f32;
}

impl Scalar for f32 {
    #[inline(always)]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn c(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn to_f32(self) -> f32 {
        self as f32
    }
}

/// A dense multi-dimensional array of reals, optionally participating in a
/// gradient tape.
///
/// Cloning is cheap: the buffer is shared behind an `Arc`. Tensors are
/// immutable values; every operation produces a new tensor.
#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    node: Option<NodeId>,
}

impl<S: Scalar> Tensor<S> {
    /// Build a tensor from a flat row-major buffer.
    ///
    /// The product of `shape` must equal `data.len()`, every extent must be
    /// at least 1, and the rank must not exceed [`MAX_RANK`].
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::dimension(format!(
                "tensor rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dimension(format!("zero extent in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {shape:?} implies {numel} elements, buffer holds {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    /// Build a tensor that shares an existing buffer (zero-copy reshape).
    pub(crate) fn from_shared(shape: &[usize], data: Arc<Vec<S>>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::dimension(format!(
                "tensor rank must be 1..={MAX_RANK}, got {}",
                shape.len()
            )));
        }
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || numel != data.len() {
            return Err(Error::dimension(format!(
                "shape {shape:?} incompatible with buffer of {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            node: None,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![S::zero(); numel])
    }

    /// All-value tensor of the given shape.
    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// One-element tensor.
    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Whether this tensor participates in gradient computation.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: Option<NodeId>) -> Self {
        self.node = node;
        self
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<S>> {
        Arc::clone(&self.data)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::contract(format!(
                "item() requires exactly one element, shape is {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Convert the element type (used at the weight-file boundary and by the
    /// double-precision gradient checker).
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| T::c(v.to_f64())).collect()),
            node: None,
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, grad={}, data[..{}]={:?})",
            self.shape,
            self.node.is_some(),
            self.numel().min(8),
            &self.data[..self.numel().min(8)]
        )
    }
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
