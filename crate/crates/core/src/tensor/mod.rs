//! Dense `f64` tensors, the forward kernels used by the network, and a
//! reverse-mode gradient tape.
//!
//! Layout is row-major and channels-first everywhere: a feature map is
//! `[C, H, W]`, a batch of row vectors is `[B, N]`.

pub mod checkpoint;
pub(crate) mod kernels;
pub mod ops;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use tape::{CustomBackward, Gradients, Tape, Var};

use crate::error::{MitosError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MitosError::shape(
                "tensor",
                format!("{} values for shape {:?}", numel, shape),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor over `values`.
    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(MitosError::shape(
                "set_grad",
                self.data.len(),
                grad.len(),
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `grad` into the stored gradient, creating it if absent.
    pub fn accumulate_grad(&mut self, grad: &[f64]) -> Result<()> {
        match &mut self.grad {
            Some(g) => {
                if g.len() != grad.len() {
                    return Err(MitosError::shape("accumulate_grad", g.len(), grad.len()));
                }
                g.iter_mut().zip(grad).for_each(|(a, b)| *a += b);
            }
            None => self.set_grad(grad.to_vec())?,
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(MitosError::shape(
                "reshape",
                format!("{:?}", self.shape),
                format!("{:?}", shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(MitosError::shape(op, "[C, H, W]", format!("{:?}", other))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}
