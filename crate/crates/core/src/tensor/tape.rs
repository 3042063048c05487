//! The recording tape: forward operations and the single reverse sweep.
//!
//! Every operation validates shapes, computes its value eagerly, and —
//! if at least one input is attached to the tape — appends a node
//! holding the op kind, input node ids and whatever activations the
//! backward rule needs. Plain (unattached) tensors are interned as
//! constant leaves on first use. With no attached inputs an operation is
//! pure computation and records nothing, which is the inference path.
//!
//! The node list is append-only and therefore already topologically
//! ordered: [`Tape::backward`] walks it once in reverse, accumulating
//! gradients in a fixed order, so two backward passes over identically
//! built tapes produce bitwise-identical results. A tape can run
//! backward once; it must be [`Tape::reset`] before reuse.

use std::sync::Arc;

use crate::scalar::Scalar;

use super::{numel_of, NodeRef, Tensor, TensorError};

/// Tanh-based GELU: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Distances below this are treated as coincident points: the distance
/// term gets a zero (sub)gradient instead of a division by ~0.
const COINCIDENT_EPS: f64 = 1e-12;

fn gelu_value<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_COEFF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

/// One recorded prediction/target pair of a matched-distance loss:
/// the loss contributes `weight * |pred_row - target|`.
#[derive(Debug, Clone)]
pub struct MatchPair<T> {
    pub pred_row: usize,
    pub target: [T; 3],
    pub weight: T,
}

/// Op kind plus saved activations; indices refer to other tape nodes.
#[derive(Debug)]
enum Op<T> {
    Leaf {
        requires_grad: bool,
    },
    Matmul {
        a: usize,
        b: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    /// Row-wise softmax of a matrix; backward uses the saved output.
    SoftmaxRows {
        a: usize,
    },
    /// Layer normalisation over the last axis of a matrix with learnable
    /// affine parameters. Saves the pre-affine normalised values and the
    /// per-row inverse standard deviation.
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        a: usize,
    },
    /// Max over one axis; `argmax` stores, per output element, the
    /// winning position along the reduced axis (ties resolved toward the
    /// lowest index at forward time).
    MaxReduce {
        a: usize,
        axis: usize,
        argmax: Vec<usize>,
    },
    MeanReduce {
        a: usize,
        axis: usize,
    },
    Reshape {
        a: usize,
    },
    Transpose {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    GatherRows {
        a: usize,
        indices: Vec<usize>,
    },
    /// Adds a row vector to every row of a matrix.
    AddRow {
        a: usize,
        row: usize,
    },
    /// Scalar sum of weighted distances between prediction rows and
    /// fixed target points, with the pairing recorded at forward time.
    MatchedDistance {
        pred: usize,
        pairs: Vec<MatchPair<T>>,
        dists: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
}

/// Gradients produced by one backward sweep, addressable by the tensors
/// that were recorded on the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `t`, if `t` was recorded on
    /// the tape this sweep ran over and received any gradient.
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let node = t.node()?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get(node.index).and_then(|g| g.as_ref())
    }
}

static TAPE_IDS: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

/// Append-only operation record with a one-shot reverse sweep.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    consumed: bool,
    macs: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: TAPE_IDS.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
            consumed: false,
            macs: 0,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once backward has run; further backward calls are rejected.
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Multiply-accumulate operations executed by matrix products so
    /// far (recorded or not). Used to compare encoder and decoder cost.
    pub fn mac_count(&self) -> u64 {
        self.macs
    }

    /// Clears all recorded nodes and re-arms backward. The tape takes a
    /// fresh identity, so tensors recorded before the reset no longer
    /// belong to it.
    pub fn reset(&mut self) {
        self.id = TAPE_IDS.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.nodes.clear();
        self.consumed = false;
        self.macs = 0;
    }

    // ------------------------------------------------------------------
    // leaves
    // ------------------------------------------------------------------

    /// Records `value` as a differentiable leaf (a parameter or input
    /// whose gradient is wanted).
    pub fn param(&mut self, value: &Tensor<T>) -> Tensor<T> {
        self.push_leaf(value, true)
    }

    /// Records `value` as a constant leaf. Ops also intern plain inputs
    /// on demand, so this is only needed to pin a specific node.
    pub fn constant(&mut self, value: &Tensor<T>) -> Tensor<T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: &Tensor<T>, requires_grad: bool) -> Tensor<T> {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf { requires_grad },
            shape: value.shape().to_vec(),
            value: Arc::clone(value.storage()),
        });
        Tensor::with_node(
            value.shape().to_vec(),
            Arc::clone(value.storage()),
            NodeRef {
                tape: self.id,
                index,
            },
        )
    }

    /// Node id of an input: its own if attached (validating tape
    /// identity), otherwise a freshly interned constant leaf.
    fn input_id(&mut self, t: &Tensor<T>, op: &'static str) -> Result<usize, TensorError> {
        match t.node() {
            Some(node) => {
                if node.tape != self.id || node.index >= self.nodes.len() {
                    return Err(TensorError::ForeignTensor { op });
                }
                Ok(node.index)
            }
            None => Ok(self.constant(t).node().expect("just interned").index),
        }
    }

    fn any_recorded(&self, inputs: &[&Tensor<T>]) -> bool {
        inputs.iter().any(|t| t.node().is_some())
    }

    /// Wraps a computed value, recording a node when `record` is true.
    fn emit(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        record: bool,
        op: impl FnOnce(&mut Self) -> Result<Op<T>, TensorError>,
    ) -> Result<Tensor<T>, TensorError> {
        let data = Arc::new(data);
        if !record {
            return Ok(Tensor {
                shape,
                data,
                node: None,
            });
        }
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let op = op(self)?;
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape: shape.clone(),
            value: Arc::clone(&data),
        });
        Ok(Tensor::with_node(
            shape,
            data,
            NodeRef {
                tape: self.id,
                index,
            },
        ))
    }

    // ------------------------------------------------------------------
    // ops
    // ------------------------------------------------------------------

    /// Matrix product of a `(m,k)` and a `(k,n)` tensor.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![T::zero(); m * n];
        mm_nn(a.data(), b.data(), m, k, n, &mut out);
        self.macs += (m * k * n) as u64;
        let record = self.any_recorded(&[a, b]);
        self.emit(vec![m, n], out, record, |tape| {
            let a = tape.input_id(a, "matmul")?;
            let b = tape.input_id(b, "matmul")?;
            Ok(Op::Matmul { a, b })
        })
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise difference of two tensors of identical shape.
    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    /// Elementwise product of two tensors of identical shape.
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        a: &Tensor<T>,
        b: &Tensor<T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        make: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<Tensor<T>, TensorError> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let record = self.any_recorded(&[a, b]);
        self.emit(a.shape().to_vec(), out, record, |tape| {
            let ia = tape.input_id(a, op)?;
            let ib = tape.input_id(b, op)?;
            Ok(make(ia, ib))
        })
    }

    /// Multiplies every element by a fixed scalar.
    pub fn scale(&mut self, a: &Tensor<T>, factor: T) -> Result<Tensor<T>, TensorError> {
        let out: Vec<T> = a.data().iter().map(|&x| x * factor).collect();
        let record = self.any_recorded(&[a]);
        self.emit(a.shape().to_vec(), out, record, |tape| {
            let a = tape.input_id(a, "scale")?;
            Ok(Op::Scale { a, factor })
        })
    }

    /// Row-wise softmax of a matrix: every output row is a probability
    /// distribution over the columns.
    pub fn softmax_rows(&mut self, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "softmax_rows",
                shape: a.shape().to_vec(),
                reason: "expected a rank-2 tensor",
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &a.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(row[0], T::max);
            let target = &mut out[r * cols..(r + 1) * cols];
            let mut sum = T::zero();
            for (o, &x) in target.iter_mut().zip(row) {
                let e = (x - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in target.iter_mut() {
                *o = *o / sum;
            }
        }
        let record = self.any_recorded(&[a]);
        self.emit(a.shape().to_vec(), out, record, |tape| {
            let a = tape.input_id(a, "softmax_rows")?;
            Ok(Op::SoftmaxRows { a })
        })
    }

    /// Layer normalisation over the last axis of a matrix, with
    /// learnable per-column scale `gamma` and shift `beta` (both rank-1
    /// of length `cols`). Uses the biased variance, so the pre-affine
    /// output of each row has mean 0 and variance 1 (up to `eps`).
    pub fn layer_norm(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: f64,
    ) -> Result<Tensor<T>, TensorError> {
        if x.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: x.shape().to_vec(),
                reason: "expected a rank-2 tensor",
            });
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if gamma.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        if beta.shape() != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: x.shape().to_vec(),
                rhs: beta.shape().to_vec(),
            });
        }
        let epst = T::from_f64(eps);
        let inv_cols = T::from_f64(1.0 / cols as f64);
        let mut normalized = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_cols;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                * inv_cols;
            let is = T::one() / (var + epst).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let nh = (row[c] - mean) * is;
                normalized[r * cols + c] = nh;
                out[r * cols + c] = nh * gamma.data()[c] + beta.data()[c];
            }
        }
        let record = self.any_recorded(&[x, gamma, beta]);
        self.emit(x.shape().to_vec(), out, record, |tape| {
            let xi = tape.input_id(x, "layer_norm")?;
            let gi = tape.input_id(gamma, "layer_norm")?;
            let bi = tape.input_id(beta, "layer_norm")?;
            Ok(Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                normalized,
                inv_std,
            })
        })
    }

    /// Elementwise GELU (tanh approximation).
    pub fn gelu(&mut self, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let out: Vec<T> = a.data().iter().map(|&x| gelu_value(x)).collect();
        let record = self.any_recorded(&[a]);
        self.emit(a.shape().to_vec(), out, record, |tape| {
            let a = tape.input_id(a, "gelu")?;
            Ok(Op::Gelu { a })
        })
    }

    /// Max over `axis`, removing it from the shape. Also returns, per
    /// output element, the winning index along the reduced axis; ties
    /// resolve toward the lowest index, fixed at forward time (the
    /// backward rule routes gradient only to the recorded winners).
    pub fn max_reduce(
        &mut self,
        a: &Tensor<T>,
        axis: usize,
    ) -> Result<(Tensor<T>, Vec<usize>), TensorError> {
        let (outer, red, inner) = axis_split(a.shape(), axis, "max_reduce")?;
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = a.data()[o * red * inner + i];
                let mut best_r = 0usize;
                for r in 1..red {
                    let v = a.data()[(o * red + r) * inner + i];
                    if v > best {
                        best = v;
                        best_r = r;
                    }
                }
                out.push(best);
                argmax.push(best_r);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let record = self.any_recorded(&[a]);
        let saved = argmax.clone();
        let t = self.emit(shape, out, record, |tape| {
            let a = tape.input_id(a, "max_reduce")?;
            Ok(Op::MaxReduce {
                a,
                axis,
                argmax: saved,
            })
        })?;
        Ok((t, argmax))
    }

    /// Mean over `axis`, removing it from the shape.
    pub fn mean_reduce(&mut self, a: &Tensor<T>, axis: usize) -> Result<Tensor<T>, TensorError> {
        let (outer, red, inner) = axis_split(a.shape(), axis, "mean_reduce")?;
        let inv = T::from_f64(1.0 / red as f64);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut sum = T::zero();
                for r in 0..red {
                    sum = sum + a.data()[(o * red + r) * inner + i];
                }
                out.push(sum * inv);
            }
        }
        let mut shape = a.shape().to_vec();
        shape.remove(axis);
        let record = self.any_recorded(&[a]);
        self.emit(shape, out, record, |tape| {
            let a = tape.input_id(a, "mean_reduce")?;
            Ok(Op::MeanReduce { a, axis })
        })
    }

    /// Reinterprets the data under a new shape with the same number of
    /// elements. Shares storage; no copy.
    pub fn reshape(&mut self, a: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: "dimension sizes must be positive",
            });
        }
        if numel_of(&shape) != a.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: a.shape().to_vec(),
                rhs: shape,
            });
        }
        let record = self.any_recorded(&[a]);
        if !record {
            return Ok(Tensor {
                shape,
                data: Arc::clone(a.storage()),
                node: None,
            });
        }
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let ai = self.input_id(a, "reshape")?;
        let index = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Reshape { a: ai },
            shape: shape.clone(),
            value: Arc::clone(a.storage()),
        });
        Ok(Tensor::with_node(
            shape,
            Arc::clone(a.storage()),
            NodeRef {
                tape: self.id,
                index,
            },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: a.shape().to_vec(),
                reason: "expected a rank-2 tensor",
            });
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        transpose_into(a.data(), m, n, &mut out);
        let record = self.any_recorded(&[a]);
        self.emit(vec![n, m], out, record, |tape| {
            let a = tape.input_id(a, "transpose")?;
            Ok(Op::Transpose { a })
        })
    }

    /// Concatenates tensors along `axis`. All parts must agree on every
    /// other axis.
    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "needs at least one input",
        })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: first.shape().to_vec(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (&d, &e))| i != axis && d != e)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); numel_of(&shape)];
        let out_stride = axis_total * inner;
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let slab = len * inner;
            for o in 0..outer {
                let src = &p.data()[o * slab..(o + 1) * slab];
                let dst = &mut out[o * out_stride + offset..o * out_stride + offset + slab];
                dst.copy_from_slice(src);
            }
            offset += slab;
        }
        let record = parts.iter().any(|t| t.node().is_some());
        self.emit(shape, out, record, |tape| {
            let ids = parts
                .iter()
                .map(|p| tape.input_id(p, "concat"))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Op::Concat { parts: ids, axis })
        })
    }

    /// Selects rows of a matrix by index; rows may repeat. Backward
    /// scatter-adds into the source rows in pair order.
    pub fn gather_rows(
        &mut self,
        a: &Tensor<T>,
        indices: &[usize],
    ) -> Result<Tensor<T>, TensorError> {
        if a.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: a.shape().to_vec(),
                reason: "expected a rank-2 tensor",
            });
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: a.shape().to_vec(),
                reason: "needs at least one index",
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: ix,
                    rows,
                });
            }
            out.extend_from_slice(&a.data()[ix * cols..(ix + 1) * cols]);
        }
        let record = self.any_recorded(&[a]);
        self.emit(vec![indices.len(), cols], out, record, |tape| {
            let a = tape.input_id(a, "gather_rows")?;
            Ok(Op::GatherRows {
                a,
                indices: indices.to_vec(),
            })
        })
    }

    /// Adds a rank-1 row vector to every row of a matrix.
    pub fn add_row(&mut self, a: &Tensor<T>, row: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if a.rank() != 2 || row.rank() != 1 || row.shape()[0] != a.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                lhs: a.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let (rows, cols) = (a.shape()[0], a.shape()[1]);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = a.data()[r * cols + c] + row.data()[c];
            }
        }
        let record = self.any_recorded(&[a, row]);
        self.emit(a.shape().to_vec(), out, record, |tape| {
            let ai = tape.input_id(a, "add_row")?;
            let ri = tape.input_id(row, "add_row")?;
            Ok(Op::AddRow { a: ai, row: ri })
        })
    }

    /// Scalar loss `sum_i weight_i * |pred[row_i] - target_i|` over a
    /// fixed pairing recorded by the caller at forward time. `pred` must
    /// be an `(m, 3)` tensor of points. Pairs whose distance is below a
    /// coincidence threshold contribute zero gradient.
    pub fn matched_distance(
        &mut self,
        pred: &Tensor<T>,
        pairs: Vec<MatchPair<T>>,
    ) -> Result<Tensor<T>, TensorError> {
        if pred.rank() != 2 || pred.shape()[1] != 3 {
            return Err(TensorError::InvalidShape {
                op: "matched_distance",
                shape: pred.shape().to_vec(),
                reason: "expected an (m, 3) tensor of points",
            });
        }
        let rows = pred.shape()[0];
        let mut total = T::zero();
        let mut dists = Vec::with_capacity(pairs.len());
        for pair in &pairs {
            if pair.pred_row >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "matched_distance",
                    index: pair.pred_row,
                    rows,
                });
            }
            let p = &pred.data()[pair.pred_row * 3..pair.pred_row * 3 + 3];
            let dx = p[0] - pair.target[0];
            let dy = p[1] - pair.target[1];
            let dz = p[2] - pair.target[2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            dists.push(d);
            total = total + pair.weight * d;
        }
        let record = self.any_recorded(&[pred]);
        self.emit(vec![], vec![total], record, |tape| {
            let pred = tape.input_id(pred, "matched_distance")?;
            Ok(Op::MatchedDistance { pred, pairs, dists })
        })
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Reverse sweep from a recorded scalar loss. Visits every node at
    /// most once in reverse creation order and returns the accumulated
    /// gradients. A second call without [`Tape::reset`] is rejected.
    pub fn backward(&mut self, loss: &Tensor<T>) -> Result<Gradients<T>, TensorError> {
        if self.consumed {
            return Err(TensorError::BackwardConsumed);
        }
        let node = loss.node().ok_or(TensorError::LossNotRecorded)?;
        if node.tape != self.id || node.index >= self.nodes.len() {
            return Err(TensorError::ForeignTensor { op: "backward" });
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[node.index] = Some(vec![T::one()]);

        for id in (0..=node.index).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        let tensors = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                // Constants take part in propagation but report no
                // gradient of their own.
                if matches!(
                    self.nodes[i].op,
                    Op::Leaf {
                        requires_grad: false
                    }
                ) {
                    return None;
                }
                g.map(|data| Tensor {
                    shape: self.nodes[i].shape.clone(),
                    data: Arc::new(data),
                    node: None,
                })
            })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: tensors,
        })
    }

    /// Applies the backward rule of node `id`, accumulating into the
    /// gradients of its inputs.
    fn propagate(&self, id: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let value_of = |ix: usize| -> &[T] { &self.nodes[ix].value };
        let shape_of = |ix: usize| -> &[usize] { &self.nodes[ix].shape };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shape_of(*a)[0], shape_of(*a)[1]);
                let n = shape_of(*b)[1];
                {
                    let ga = slot(grads, *a, m * k);
                    mm_nt(gout, value_of(*b), m, k, n, ga);
                }
                let gb = slot(grads, *b, k * n);
                mm_tn(value_of(*a), gout, m, k, n, gb);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, gout.iter().cloned());
                accumulate(grads, *b, gout.iter().cloned());
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, gout.iter().cloned());
                accumulate(grads, *b, gout.iter().map(|&g| T::zero() - g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (value_of(*a), value_of(*b));
                accumulate(grads, *a, gout.iter().zip(bv).map(|(&g, &y)| g * y));
                accumulate(grads, *b, gout.iter().zip(av).map(|(&g, &x)| g * x));
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, gout.iter().map(|&g| g * *factor));
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let cols = node.shape[1];
                let ga = slot(grads, *a, y.len());
                for r in 0..node.shape[0] {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &gout[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(T::zero(), |s, (&yv, &gv)| s + yv * gv);
                    let target = &mut ga[r * cols..(r + 1) * cols];
                    for ((t, &yv), &gv) in target.iter_mut().zip(yr).zip(gr) {
                        *t = *t + yv * (gv - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let gv = value_of(*gamma);
                let inv_cols = T::from_f64(1.0 / cols as f64);
                {
                    let gg = slot(grads, *gamma, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] = gg[c] + gout[r * cols + c] * normalized[r * cols + c];
                        }
                    }
                }
                {
                    let gb = slot(grads, *beta, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[c] = gb[c] + gout[r * cols + c];
                        }
                    }
                }
                let gx = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let nh = &normalized[r * cols..(r + 1) * cols];
                    let go = &gout[r * cols..(r + 1) * cols];
                    let mut mean_dn = T::zero();
                    let mut mean_dn_nh = T::zero();
                    for c in 0..cols {
                        let dn = go[c] * gv[c];
                        mean_dn = mean_dn + dn;
                        mean_dn_nh = mean_dn_nh + dn * nh[c];
                    }
                    mean_dn = mean_dn * inv_cols;
                    mean_dn_nh = mean_dn_nh * inv_cols;
                    let target = &mut gx[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let dn = go[c] * gv[c];
                        target[c] = target[c] + inv_std[r] * (dn - mean_dn - nh[c] * mean_dn_nh);
                    }
                }
            }
            Op::Gelu { a } => {
                let av = value_of(*a);
                accumulate(
                    grads,
                    *a,
                    gout.iter().zip(av).map(|(&g, &x)| g * gelu_derivative(x)),
                );
            }
            Op::MaxReduce { a, axis, argmax } => {
                let in_shape = shape_of(*a);
                let (_, red, inner) = axis_split(in_shape, *axis, "max_reduce").expect("validated");
                let ga = slot(grads, *a, numel_of(in_shape));
                for (flat, &r) in argmax.iter().enumerate() {
                    let (o, i) = (flat / inner, flat % inner);
                    let src = (o * red + r) * inner + i;
                    ga[src] = ga[src] + gout[flat];
                }
            }
            Op::MeanReduce { a, axis } => {
                let in_shape = shape_of(*a);
                let (outer, red, inner) =
                    axis_split(in_shape, *axis, "mean_reduce").expect("validated");
                let inv = T::from_f64(1.0 / red as f64);
                let ga = slot(grads, *a, numel_of(in_shape));
                for o in 0..outer {
                    for r in 0..red {
                        for i in 0..inner {
                            let dst = (o * red + r) * inner + i;
                            ga[dst] = ga[dst] + gout[o * inner + i] * inv;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                accumulate(grads, *a, gout.iter().cloned());
            }
            Op::Transpose { a } => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let ga = slot(grads, *a, m * n);
                for i in 0..n {
                    for j in 0..m {
                        ga[j * n + i] = ga[j * n + i] + gout[i * m + j];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &node.shape;
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let out_stride = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let pshape = shape_of(p).to_vec();
                    let slab = pshape[*axis] * inner;
                    let gp = slot(grads, p, numel_of(&pshape));
                    for o in 0..outer {
                        let src = &gout[o * out_stride + offset..o * out_stride + offset + slab];
                        let dst = &mut gp[o * slab..(o + 1) * slab];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    offset += slab;
                }
            }
            Op::GatherRows { a, indices } => {
                let cols = node.shape[1];
                let ga = slot(grads, *a, numel_of(shape_of(*a)));
                for (r, &src_row) in indices.iter().enumerate() {
                    let src = &gout[r * cols..(r + 1) * cols];
                    let dst = &mut ga[src_row * cols..(src_row + 1) * cols];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            Op::AddRow { a, row } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                accumulate(grads, *a, gout.iter().cloned());
                let gr = slot(grads, *row, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        gr[c] = gr[c] + gout[r * cols + c];
                    }
                }
            }
            Op::MatchedDistance { pred, pairs, dists } => {
                let g = gout[0];
                let pv = value_of(*pred);
                let eps = T::from_f64(COINCIDENT_EPS);
                let gp = slot(grads, *pred, numel_of(shape_of(*pred)));
                for (pair, &d) in pairs.iter().zip(dists) {
                    if d < eps {
                        continue;
                    }
                    let coeff = g * pair.weight / d;
                    let base = pair.pred_row * 3;
                    for c in 0..3 {
                        gp[base + c] = gp[base + c] + coeff * (pv[base + c] - pair.target[c]);
                    }
                }
            }
        }
    }
}

/// Gets (allocating on first touch) the gradient buffer of node `id`.
fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], id: usize, len: usize) -> &mut Vec<T> {
    grads[id].get_or_insert_with(|| vec![T::zero(); len])
}

/// Adds an elementwise contribution into the gradient buffer of `id`.
fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    id: usize,
    contribution: impl ExactSizeIterator<Item = T>,
) {
    let buf = slot(grads, id, contribution.len());
    for (b, c) in buf.iter_mut().zip(contribution) {
        *b = *b + c;
    }
}

/// Splits `shape` at `axis` into (outer, reduced, inner) extents.
fn axis_split(
    shape: &[usize],
    axis: usize,
    op: &'static str,
) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c += a(m,k) * b(k,n)`, row-major.
fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += a(m,k) * b(n,k)^T`, i.e. `c[i][j] = dot(a_row_i, b_row_j)`.
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut sum = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                sum = sum + av * bv;
            }
            *cv = *cv + sum;
        }
    }
}

/// `c += a(m,k)^T * b(m,n)`, i.e. `c[t][j] = sum_i a[i][t] b[i][j]`.
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (t, &av) in arow.iter().enumerate() {
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn transpose_into<T: Scalar>(a: &[T], m: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = t(vec![1, 2], vec![0.0, 0.0]);
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = t(vec![2, 3], vec![1.0, -2.0, 0.5, 10.0, 10.0, -10.0]);
        let y = tape.softmax_rows(&x).unwrap();
        for r in 0..2 {
            let s: f64 = y.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12, "row {r} sums to {s}");
        }
    }

    #[test]
    fn max_reduce_returns_values_and_argmax() {
        let mut tape = Tape::new();
        let x = t(vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let (vals, arg) = tape.max_reduce(&x, 0).unwrap();
        assert_eq!(vals.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
    }

    #[test]
    fn max_reduce_ties_pick_lowest_index() {
        let mut tape = Tape::new();
        let x = t(vec![3], vec![7.0, 7.0, 7.0]);
        let (_, arg) = tape.max_reduce(&x, 0).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn backward_of_elementwise_square_sum() {
        // loss = sum(x * x) for x = [1, 2] has gradient [2, 4].
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![2], vec![1.0, 2.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let mean = tape.mean_reduce(&sq, 0).unwrap();
        let loss = tape.scale(&mean, 2.0).unwrap();
        assert_eq!(loss.scalar().unwrap(), 5.0);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_of_max_routes_gradient_to_winner() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![2], vec![3.0, 7.0]));
        let (loss, _) = tape.max_reduce(&x, 0).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn rectangular_matmul_gradients_match_closed_form() {
        // C = A(2,3) * B(3,4), loss = mean(C). dL/dC is uniformly 1/8,
        // so dL/dA[i][t] = row_sum(B, t) / 8 (same for every i) and
        // dL/dB[t][j] = col_sum(A, t) / 8 (same for every j).
        let mut tape = Tape::new();
        let a = tape.param(&t(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]));
        let b = tape.param(&t(
            vec![3, 4],
            vec![2.0, 1.0, 0.0, -1.0, 3.0, -2.0, 1.0, 4.0, 0.5, 0.5, 2.0, -3.0],
        ));
        let c = tape.matmul(&a, &b).unwrap();
        let flat = tape.reshape(&c, vec![8]).unwrap();
        let loss = tape.mean_reduce(&flat, 0).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let row_sums_b = [2.0, 6.0, 0.0];
        let ga = grads.get(&a).unwrap();
        for i in 0..2 {
            for t_ix in 0..3 {
                let expect = row_sums_b[t_ix] / 8.0;
                assert!((ga.at(&[i, t_ix]) - expect).abs() < 1e-12);
            }
        }
        let col_sums_a = [1.5, 2.0, 2.0];
        let gb = grads.get(&b).unwrap();
        for t_ix in 0..3 {
            for j in 0..4 {
                let expect = col_sums_a[t_ix] / 8.0;
                assert!((gb.at(&[t_ix, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_twice_without_reset_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![1], vec![2.0]));
        let loss = tape.mean_reduce(&x, 0).unwrap();
        tape.backward(&loss).unwrap();
        let err = tape.backward(&loss).unwrap_err();
        assert!(matches!(err, TensorError::BackwardConsumed));
    }

    #[test]
    fn reset_rearms_backward() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![1], vec![2.0]));
        let loss = tape.mean_reduce(&x, 0).unwrap();
        tape.backward(&loss).unwrap();
        tape.reset();
        assert!(!tape.is_consumed());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 3], vec![0.0; 6]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "message should name the op: {msg}");
        assert!(msg.contains("[2, 3]"), "message should show shapes: {msg}");
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(&t(vec![2], vec![1.0, 2.0]));
        let y = tape.scale(&x, 2.0).unwrap();
        let err = tape.backward(&y).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.param(&t(vec![1], vec![1.0]));
        let err = b.scale(&x, 2.0).unwrap_err();
        assert!(matches!(err, TensorError::ForeignTensor { .. }));
    }

    #[test]
    fn unattached_inputs_record_nothing() {
        let mut tape = Tape::new();
        let a = t(vec![2], vec![1.0, 2.0]);
        let b = t(vec![2], vec![3.0, 4.0]);
        let c = tape.add(&a, &b).unwrap();
        assert_eq!(c.data(), &[4.0, 6.0]);
        assert!(!c.is_recorded());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn layer_norm_pre_affine_rows_are_standardised() {
        let mut tape = Tape::new();
        let x = t(vec![2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 5.0, 0.0, 2.5]);
        let gamma = t(vec![4], vec![1.0; 4]);
        let beta = t(vec![4], vec![0.0; 4]);
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        for r in 0..2 {
            let row = &y.data()[r * 4..(r + 1) * 4];
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10, "row {r} mean {mean}");
            assert!((var - 1.0).abs() <= 1e-8, "row {r} var {var}");
        }
    }

    #[test]
    fn matmul_counts_macs() {
        let mut tape = Tape::new();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![3, 4], vec![0.0; 12]);
        tape.matmul(&a, &b).unwrap();
        assert_eq!(tape.mac_count(), 24);
    }
}
