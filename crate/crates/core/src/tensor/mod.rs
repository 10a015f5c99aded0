//! Dense row-major `f64` arrays and the reverse-mode tape that differentiates them.
//!
//! [`Tensor`] is a plain value container. Differentiation happens on a
//! [`Tape`]: leaves are registered with [`Tape::leaf`], every operation
//! called on the tape records what it needs for the backward pass, and
//! [`Tape::backward`] walks the records in reverse.
//!
//! ```
//! use specmimic::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

mod conv;
mod gemm;
pub mod gradcheck;
pub mod init;
mod lstm;
mod tape;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use conv::{conv_output_len, ConvGeometry, Padding};
pub use gemm::gemm;
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, weighted_sum};
pub use lstm::{Combine, LstmDirection};
pub use tape::{Activation, BatchNormState, BatchStats, BnMode, RunningStats, Tape, Var};

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("data length {len} does not match dims {dims:?}")]
    DataLength { dims: Vec<usize>, len: usize },
    #[error("dims {0:?} contain a zero-sized axis")]
    ZeroDim(Vec<usize>),
    #[error("conv2d: kernel {kernel:?} larger than padded input {input:?}")]
    KernelTooLarge {
        kernel: (usize, usize),
        input: (usize, usize),
    },
    #[error("conv2d: stride must be positive")]
    ZeroStride,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout rate {0} must lie in [0, 1)")]
    InvalidRate(f64),
    #[error("loss must be a scalar, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable #{0} is not on this tape")]
    UnknownVar(usize),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// An n-dimensional row-major array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDim(dims));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                dims,
                len: data.len(),
            });
        }
        Ok(Self { dims, data })
    }

    /// Panics on a zero-sized axis; use [`Tensor::new`] for fallible construction.
    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f64) -> Self {
        let dims = dims.into();
        assert!(
            !dims.is_empty() && dims.iter().all(|&d| d > 0),
            "invalid dims {dims:?}"
        );
        let n = dims.iter().product();
        Self {
            dims,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(dims: impl Into<Vec<usize>>, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(dims, |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(dims: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(dims, |_| rng.random_range(lo..hi))
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.dims[self.dims.len() - 1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }
}

pub(crate) fn dims_str(dims: &[usize]) -> String {
    let parts: Vec<String> = dims.iter().map(|d| d.to_string()).collect();
    parts.join("x")
}
