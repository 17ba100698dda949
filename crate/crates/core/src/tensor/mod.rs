//! Dense row-major tensors with the handful of primitives the capsule
//! network needs, plus a primitive-level reverse-mode tape.
//!
//! Tensors are immutable once built: the buffer sits behind an `Arc`, so
//! cloning a tensor (for example when registering a parameter on a tape)
//! never copies the data.

mod kernels;
mod tape;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use kernels::{squash_in_place, SQUASH_EPS};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: invalid axis {axis} for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("conv2d: stride must be positive")]
    InvalidStride,
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Activation applied after a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                expected: format!("{} values for shape {:?}", expected, shape),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: data.into(),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n].into(),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n].into(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value].into(),
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: data.into(),
        }
    }

    /// Internal constructor for kernels that already produced a buffer of the right length.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: data.into(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get(&self, index: &[usize]) -> Option<f64> {
        if index.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return None;
            }
            flat = flat * d + i;
        }
        Some(self.data[flat])
    }

    /// Same buffer viewed under a new shape of equal size.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.len() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.len()),
                got: format!("{:?}", shape),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.len())
        }
    }
}

/// Output extent of a valid (unpadded) convolution.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Valid 2-D convolution over an `[H, W, Cin]` input with `[kh, kw, Cin, Cout]`
/// filters. Each output is `f(w . x + b)` over its receptive field.
pub fn conv2d(
    input: &Tensor,
    filters: &Tensor,
    bias: &Tensor,
    stride: usize,
    activation: Activation,
) -> Result<Tensor> {
    let geom = kernels::ConvGeom::check(input.shape(), filters.shape(), bias.shape(), stride)?;
    let mut out = kernels::conv2d_forward(&geom, input.data(), filters.data(), bias.data());
    if activation == Activation::Relu {
        for v in &mut out {
            *v = v.max(0.0);
        }
    }
    Ok(Tensor::from_parts(geom.out_shape(), out))
}

/// Softmax along `axis`, max-shifted before exponentiation.
pub fn softmax(input: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= input.rank() {
        return Err(TensorError::InvalidAxis {
            op: "softmax",
            axis,
            rank: input.rank(),
        });
    }
    let out = kernels::softmax_axis(input.shape(), input.data(), axis);
    Ok(Tensor::from_parts(input.shape().to_vec(), out))
}
