//! Dense f32 tensors with a tape-based reverse-mode autodiff graph.
//!
//! The operator set is closed: matmul, add/mul (with suffix broadcasting),
//! gelu, swish, sigmoid, layer norm, softmax/log-softmax, masked depthwise
//! conv1d, strided conv2d, embedding lookup, dropout, and the shape ops
//! concat/slice/permute/reshape. Everything else in the crate is composed
//! from these.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use gradcheck::{check_gradients, GradCheck};
pub use graph::{Conv2dGeom, Graph, Var};

/// Maximum supported rank.
pub const MAX_RANK: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// Index of a trainable parameter inside a [`crate::params::ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Row-major f32 tensor of rank at most 4.
///
/// Storage is reference counted so that graph leaves can share parameter
/// buffers without copying; mutation goes through copy-on-write.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(shape_err("tensor", format!("rank {} > {MAX_RANK}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
            requires_grad: false,
            grad: None,
        })
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f32>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: rank within limit")
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: rank within limit")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f32 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(shape, data).expect("randn: rank within limit")
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f32>> {
        &self.data
    }

    /// Mutable access; clones the buffer if it is shared with a live graph.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.numel(), "gradient length must match tensor");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() || shape.len() > MAX_RANK {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self::from_arc(shape.to_vec(), self.data.clone()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = *self.shape.last().unwrap_or(&1);
        &self.data[i * d..(i + 1) * d]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
        let t = Tensor::new(&[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.reshape(&[3, 2]).unwrap().shape(), &[3, 2]);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert!(t.grad().is_none());
    }
}
