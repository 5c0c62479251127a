//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them in reverse to accumulate gradients. The op set is exactly
//! what the two small networks and the gradient-based attacks need; there is
//! no broadcasting and no dynamic graph beyond that.

mod gradcheck;
mod tape;

pub use gradcheck::{allclose, finite_diff_grad};
pub use tape::{Tape, Var};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::{CoreError, Result};

/// Dense n-dimensional array, row-major, with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "shape {:?} holds {} elements, data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    /// Constant-filled tensor.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// 0-dimensional scalar.
    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Self { shape: vec![n], data, requires_grad: false, grad: None }
    }

    /// Mark this tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Scalars are rank-0 or single-element tensors.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient of the same shape as `data`, populated by [`Tape::backward`].
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Same data, different shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(CoreError::ShapeMismatch(alloc::format!(
                "cannot reshape {} elements into {:?}",
                self.data.len(),
                shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape;
        Ok(t)
    }

    /// First index of the maximum element (row-major tie-break).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Unvalidated constructor for ops that already know the shape is right.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Option<Vec<f64>> {
        &mut self.grad
    }

    pub(crate) fn set_requires_grad(&mut self, rg: bool) {
        self.requires_grad = rg;
    }
}

pub(crate) fn shape_string(shape: &[usize]) -> String {
    alloc::format!("{:?}", shape)
}
