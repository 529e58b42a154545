//! Dense `f64` tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiation happens on a
//! [`Tape`]: values are placed on it as leaves and every operation applied
//! through a [`Var`] handle is recorded together with its backward rule.

mod axis_map;
mod gradcheck;
mod tape;

pub use axis_map::AxisMap;
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward: loss does not depend on any tensor that requires grad")]
    DetachedLoss,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = TensorError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::InvalidArgument {
                op: "tensor",
                msg: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Sub-tensor at position `index` along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| TensorError::InvalidArgument {
            op: "stack",
            msg: "no tensors to stack".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Applies a linear map along `axis` without recording anything.
    pub fn apply_axis_map(&self, axis: usize, map: &AxisMap) -> Result<Self> {
        map.apply(self, axis)
    }

    /// Non-overlapping window means along `axis`; the ragged tail is averaged
    /// over its actual length.
    pub fn avg_downsample(&self, axis: usize, factor: usize) -> Result<Self> {
        let len = self.axis_len("avg_downsample", axis)?;
        AxisMap::downsample(len, factor)?.apply(self, axis)
    }

    /// Centered moving average with replicate padding.
    pub fn moving_average(&self, axis: usize, kernel: usize) -> Result<Self> {
        let len = self.axis_len("moving_average", axis)?;
        AxisMap::moving_average(len, kernel)?.apply(self, axis)
    }

    /// Endpoint-aligned piecewise-linear resampling along `axis`.
    pub fn linear_interp(&self, axis: usize, new_len: usize) -> Result<Self> {
        let len = self.axis_len("linear_interp", axis)?;
        AxisMap::linear_interp(len, new_len)?.apply(self, axis)
    }

    /// `[B, T, D] -> [B, N, P, D]`, right-padding by repeating the last step.
    pub fn patchify(&self, patch_len: usize) -> Result<Self> {
        let [b, t, d] = expect_rank3("patchify", &self.shape)?;
        let (map, n) = AxisMap::patch_pad(t, patch_len)?;
        map.apply(self, 1)?.reshape(&[b, n, patch_len, d])
    }

    /// Inverse of [`Tensor::patchify`], dropping the padded tail.
    pub fn unpatchify(&self, seq_len: usize) -> Result<Self> {
        let [b, n, p, d] = expect_rank4("unpatchify", &self.shape)?;
        let flat = self.clone().reshape(&[b, n * p, d])?;
        AxisMap::truncate(n * p, seq_len)?.apply(&flat, 1)
    }

    pub(crate) fn axis_len(&self, op: &'static str, axis: usize) -> Result<usize> {
        self.shape
            .get(axis)
            .copied()
            .ok_or(TensorError::AxisOutOfRange {
                op,
                axis,
                rank: self.shape.len(),
            })
    }
}

pub(crate) fn expect_rank3(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a rank-3 tensor, got shape {shape:?}"),
        }),
    }
}

pub(crate) fn expect_rank4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a rank-4 tensor, got shape {shape:?}"),
        }),
    }
}
