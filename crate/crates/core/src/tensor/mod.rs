//! Minimal dense-array engine with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable multi-dimensional value; a [`Tape`]
//! records operations applied to tensors and can replay them backwards
//! once to produce gradients. The op set is deliberately small — exactly
//! what the encoder/decoder network and its reconstruction loss need —
//! so every backward rule is enumerable and individually tested. There
//! is no general broadcasting; the only broadcast is adding a row vector
//! to every row of a matrix.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_FD_STEP};
pub use tape::{Gradients, MatchPair, Tape};

use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: row index {index} out of range for {rows} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        rows: usize,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: tensor does not belong to this tape")]
    ForeignTensor { op: &'static str },
    #[error("backward already ran on this tape; call reset() first")]
    BackwardConsumed,
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward requires the loss to be recorded on the tape")]
    LossNotRecorded,
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
}

/// Identifies a node on a specific tape, so values from one tape cannot
/// silently be consumed by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub index: usize,
}

/// An immutable dense array: a shape, shared storage in row-major order,
/// and an optional handle onto the tape that produced it.
///
/// Cloning is cheap (the storage is reference-counted). A tensor without
/// a node handle is a plain value; tape operations treat such inputs as
/// constants.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeRef>,
}

/// Number of elements implied by a shape. The empty shape is a scalar.
pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn validate_shape(shape: &[usize], op: &'static str) -> Result<(), TensorError> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: "dimension sizes must be positive",
        });
    }
    Ok(())
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and row-major data.
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        validate_shape(&shape, "from_vec")?;
        if numel_of(&shape) != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    /// A scalar tensor (empty shape, one element).
    pub fn from_scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![value]),
            node: None,
        }
    }

    /// A tensor of zeros.
    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        validate_shape(&shape, "zeros")?;
        let n = numel_of(&shape);
        Ok(Self {
            shape,
            data: Arc::new(vec![T::zero(); n]),
            node: None,
        })
    }

    /// Builds an `n x 3` tensor from a slice of 3-vectors.
    pub fn from_rows3(rows: &[[T; 3]]) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(rows.len() * 3);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::from_vec(vec![rows.len(), 3], data)
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

    /// Row-major storage.
    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// The single element of a scalar tensor.
    pub fn scalar(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element access by multi-index (row-major).
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// The same value detached from any tape.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// True when the tensor is recorded on a tape.
    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn node(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Arc<Vec<T>>, node: NodeRef) -> Self {
        Self {
            shape,
            data,
            node: Some(node),
        }
    }

    pub(crate) fn storage(&self) -> &Arc<Vec<T>> {
        &self.data
    }

    /// Mutable storage access for the optimiser. Clones the buffer only
    /// if it is shared.
    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        let buf: &mut Vec<T> = Arc::make_mut(&mut self.data);
        buf.as_mut_slice()
    }
}
