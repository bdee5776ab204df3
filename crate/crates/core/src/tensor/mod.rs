//! Dense tensor math with reverse-mode gradients.
//!
//! The engine is deliberately small: a closed vocabulary of ops (matmul,
//! layer norm, temperature softmax, elementwise add/mul/relu, reductions and
//! a few shape movers) recorded on an eager tape ([`graph::Graph`]), enough
//! to express the patch transformer and its losses. Values are immutable
//! once created; `f32` is the default compute precision and `f64` is used by
//! the finite-difference verification harness, which needs the headroom.
//!
//! Cross-platform note: forward passes are bit-identical for a fixed seed on
//! one platform; across platforms (different libm), expect agreement to ~1e-6.

mod fdcheck;
mod graph;
pub mod nn;
mod param;

pub use fdcheck::{finite_diff_check, FdReport};
pub use graph::{Gradients, Graph, Var};
pub use param::{Binding, ParamGroup, ParamId, ParamSet, Parameter};

use std::fmt;
use std::sync::Arc;

/// Floating-point element type for tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Code stored in checkpoint files: 0 = f32, 1 = f64.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn from_f64(x: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 1;
    const BYTES: usize = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Errors raised by tensor construction and ops.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("{op}: invalid parameter: {reason}")]
    InvalidParam { op: &'static str, reason: String },
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
    #[error("{0}")]
    State(String),
}

/// Dense row-major n-dimensional float array.
///
/// Data is shared (`Arc`), so clones are cheap and tensors behave as values.
#[derive(Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
}

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<&S> = self.data.iter().take(8).collect();
        write!(f, "Tensor{:?} {:?}", self.shape, preview)?;
        if self.data.len() > 8 {
            write!(f, "…")?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("shape implies {expected} elements, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![S::zero(); n]),
        }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; n]),
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![v]),
        }
    }

    /// Matrix from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::InvalidShape {
                    op: "from_rows",
                    shape: vec![r, c],
                    reason: "ragged rows".into(),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Element at a full multi-index.
    pub fn at(&self, idx: &[usize]) -> S {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    /// Reinterpret with a new shape of identical element count (row-major).
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != self.numel() {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape,
                reason: format!("cannot hold {} elements", self.numel()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// New tensor with one coordinate replaced.
    pub fn with_coord(&self, flat: usize, v: S) -> Self {
        let mut d = self.data.as_ref().clone();
        d[flat] = v;
        Self {
            shape: self.shape.clone(),
            data: Arc::new(d),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Random tensor with entries drawn as `scale * N(0,1)`.
    pub fn randn(shape: &[usize], scale: f64, rng: &mut crate::Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::from_f64(rng.normal() * scale)).collect();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        }
    }

    /// Euclidean distance to another tensor of the same shape.
    pub fn l2_distance(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| {
                let d = a.to_f64_() - b.to_f64_();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Convert elementwise to another precision.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(
                self.data
                    .iter()
                    .map(|&v| T::from_f64(v.to_f64_()))
                    .collect(),
            ),
        }
    }
}

/// Temperature softmax over the last axis of a plain tensor (no gradient).
///
/// Rows are shifted by their max before exponentiation. `T` must be positive.
pub fn softmax_t<S: Scalar>(x: &Tensor<S>, temp: f64) -> Result<Tensor<S>, TensorError> {
    if !(temp > 0.0) {
        return Err(TensorError::InvalidParam {
            op: "softmax_t",
            reason: format!("temperature must be > 0, got {temp}"),
        });
    }
    let d = *x.shape().last().ok_or(TensorError::InvalidShape {
        op: "softmax_t",
        shape: vec![],
        reason: "rank 0 input".into(),
    })?;
    if d == 0 {
        return Err(TensorError::InvalidShape {
            op: "softmax_t",
            shape: x.shape().to_vec(),
            reason: "empty last axis".into(),
        });
    }
    let t = S::from_f64(temp);
    let mut out = vec![S::zero(); x.numel()];
    for (row_out, row_in) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        let max = row_in.iter().cloned().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for (o, &v) in row_out.iter_mut().zip(row_in.iter()) {
            *o = ((v - max) / t).exp();
            sum += *o;
        }
        for o in row_out.iter_mut() {
            *o = *o / sum;
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

/// Cosine similarity between two equal-length vectors.
pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let (x, y) = (x.to_f64_(), y.to_f64_());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na.sqrt() * nb.sqrt()).max(1e-30);
    dot / denom
}
