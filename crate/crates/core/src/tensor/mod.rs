//! Dense f32 tensors and a fixed-op reverse-mode differentiation engine.
//!
//! Storage is always 32-bit, row-major and immutable after construction;
//! reductions (matmul inner products, means, variances) accumulate in f64.
//! Gradients are only available through [`Graph`], which records the ops
//! listed in [`graph`] and replays them in reverse.

mod graph;

pub use graph::{GradMap, Graph, Value};

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("{op} expects a matrix, got shape {shape:?}")]
    NotAMatrix { op: &'static str, shape: Vec<usize> },
    #[error("target {target} out of range for vocab {vocab} at position {position}")]
    TargetOutOfRange {
        target: usize,
        vocab: usize,
        position: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

/// A dense row-major f32 tensor. Cheap to clone; data is shared.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, validating that every dimension is at least 1 and
    /// that the buffer length matches the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                shape,
                reason: "all dimension sizes must be >= 1".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidShape {
                shape,
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn scalar(v: f32) -> Self {
        Tensor::from_vec(vec![1], vec![v]).expect("scalar shape is valid")
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros shape validated by caller")
    }

    pub fn full(shape: Vec<usize>, v: f32) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![v; numel]).expect("full shape validated by caller")
    }

    /// Normal(0, sigma^2) init, deterministic given the rng state.
    pub fn randn<R: Rng>(shape: Vec<usize>, sigma: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = (0..numel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * sigma
            })
            .collect();
        Tensor::from_vec(shape, data).expect("randn shape validated by caller")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks this tensor as a gradient leaf when used as a graph input.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn detached(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    /// Number of rows when viewed as a matrix `[rows x cols]`; a 1-D tensor
    /// is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the last dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Exact bit equality, including the sign of zeros.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise mean of several same-shape tensors, accumulated in f64.
    pub fn mean_of(tensors: &[&Tensor]) -> Result<Tensor, TensorError> {
        let first = tensors.first().ok_or(TensorError::Contract {
            op: "mean_of",
            reason: "empty tensor list".into(),
        })?;
        for t in tensors {
            if t.shape != first.shape {
                return Err(TensorError::DimMismatch {
                    op: "mean_of",
                    lhs: first.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
        }
        let n = tensors.len() as f64;
        let data = (0..first.numel())
            .map(|i| (tensors.iter().map(|t| t.data[i] as f64).sum::<f64>() / n) as f32)
            .collect();
        Tensor::from_vec(first.shape.clone(), data)
    }
}
