//! Eager tape for reverse-mode differentiation.
//!
//! Each op computes its value immediately and records what it needs for the
//! backward pass. The vocabulary is closed: exactly the ops the model stack
//! uses, each with a hand-derived adjoint. Every op output is checked for
//! finiteness; a NaN/Inf surfaces as an error at the op that produced it.

use super::{Scalar, Tensor, TensorError};
use std::sync::Arc;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<S: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `b`'s shape is a suffix of `x`'s shape; grad for `b` sums the lead axes.
    AddBias {
        x: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: S,
    },
    Relu {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    SwapAxes {
        x: Var,
        a1: usize,
        a2: usize,
    },
    ConcatRows {
        a: Var,
        b: Var,
        rows_a: usize,
    },
    GatherRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    ScatterRows {
        x: Var,
        idx: Arc<Vec<usize>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
    SoftmaxT {
        x: Var,
        t: S,
        y: Tensor<S>,
    },
    CeSoft {
        logits: Var,
        targets: Tensor<S>,
        probs: Tensor<S>,
    },
    RowLseMasked {
        x: Var,
        mask: Arc<Vec<bool>>,
        lse: Vec<S>,
    },
    L2NormRows {
        x: Var,
        y: Tensor<S>,
        norms: Vec<S>,
    },
    SpaceToDepth {
        x: Var,
        h: usize,
        w: usize,
        d: usize,
        b: usize,
    },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Eager computation tape. One graph per forward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

/// Gradients keyed by [`Var`], produced by [`Graph::backward`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: Tensor<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Batched matrix multiply: `[.., m, k] x [.., k, n] -> [.., m, n]`.
    ///
    /// Operands must both be rank 2, or have identical leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() != sa.len() {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let da = self.value(a).data().to_vec();
        let db = self.value(b).data().to_vec();
        let mut out = vec![S::zero(); batch * m * n];
        for t in 0..batch {
            mm_nn(
                &da[t * m * k..(t + 1) * m * k],
                &db[t * k * n..(t + 1) * k * n],
                m,
                k,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let req = self.requires(a) || self.requires(b);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            req,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::from_vec(sa, out)?, Op::Add { a, b }, req)
    }

    /// Add with broadcast: `b`'s shape must be a suffix of `x`'s shape.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sb.is_empty() || sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let span: usize = sb.iter().product();
        let bd = self.value(b).data().to_vec();
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % span])
            .collect();
        let req = self.requires(x) || self.requires(b);
        self.push(Tensor::from_vec(sx, out)?, Op::AddBias { x, b }, req)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        self.push(Tensor::from_vec(sa, out)?, Op::Mul { a, b }, req)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let c = S::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        let req = self.requires(x);
        self.push(out, Op::Scale { x, c }, req)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v.max(S::zero()));
        let req = self.requires(x);
        self.push(out, Op::Relu { x }, req)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: S = self.value(x).data().iter().cloned().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, req)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: self.shape(x).to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let s: S = self.value(x).data().iter().cloned().sum();
        let v = s / S::from_f64(n as f64);
        let req = self.requires(x);
        self.push(Tensor::scalar(v), Op::Mean { x }, req)
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean_axis",
                shape: sx,
                reason: format!("axis {axis} out of range or empty"),
            });
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xd = self.value(x).data().to_vec();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * len + a) * inner + i];
                }
            }
        }
        let inv = S::from_f64(1.0 / len as f64);
        for v in out.iter_mut() {
            *v *= inv;
        }
        let mut shape = sx.clone();
        shape.remove(axis);
        let req = self.requires(x);
        self.push(Tensor::from_vec(shape, out)?, Op::MeanAxis { x, axis }, req)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(x).reshaped(shape)?;
        let req = self.requires(x);
        self.push(t, Op::Reshape { x }, req)
    }

    pub fn swap_axes(&mut self, x: Var, a1: usize, a2: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if a1 >= sx.len() || a2 >= sx.len() {
            return Err(TensorError::InvalidShape {
                op: "swap_axes",
                shape: sx,
                reason: format!("axes ({a1},{a2}) out of range"),
            });
        }
        let t = swap_axes_raw(self.value(x), a1, a2);
        let req = self.requires(x);
        self.push(t, Op::SwapAxes { x, a1, a2 }, req)
    }

    /// Concatenate two matrices along axis 0.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            });
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let shape = vec![sa[0] + sb[0], sa[1]];
        let req = self.requires(a) || self.requires(b);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::ConcatRows {
                a,
                b,
                rows_a: sa[0],
            },
            req,
        )
    }

    /// Select rows of a matrix: `out[r] = x[idx[r]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: sx,
                reason: "expected a matrix".into(),
            });
        }
        let d = sx[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= sx[0]) {
            return Err(TensorError::InvalidParam {
                op: "gather_rows",
                reason: format!("row index {bad} out of range for {} rows", sx[0]),
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx.iter() {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let shape = vec![idx.len(), d];
        let req = self.requires(x);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::GatherRows { x, idx },
            req,
        )
    }

    /// Scatter-add rows into a zero matrix with `rows` rows: `out[idx[r]] += x[r]`.
    pub fn scatter_rows(
        &mut self,
        x: Var,
        idx: Arc<Vec<usize>>,
        rows: usize,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != idx.len() {
            return Err(TensorError::InvalidShape {
                op: "scatter_rows",
                shape: sx,
                reason: format!("expected [{} x d] matrix", idx.len()),
            });
        }
        let d = sx[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidParam {
                op: "scatter_rows",
                reason: format!("target row {bad} out of range for {rows} rows"),
            });
        }
        let xd = self.value(x).data();
        let mut out = vec![S::zero(); rows * d];
        for (r, &i) in idx.iter().enumerate() {
            for c in 0..d {
                out[i * d + c] += xd[r * d + c];
            }
        }
        let req = self.requires(x);
        self.push(
            Tensor::from_vec(vec![rows, d], out)?,
            Op::ScatterRows { x, idx },
            req,
        )
    }

    /// Layer normalization over the last axis, then affine with gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: sx,
                reason: "empty last axis".into(),
            });
        }
        if !(eps > 0.0) {
            return Err(TensorError::InvalidParam {
                op: "layer_norm",
                reason: format!("eps must be > 0, got {eps}"),
            });
        }
        for v in [gamma, beta] {
            if self.shape(v) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / d;
        let xd = self.value(x).data().to_vec();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let epss = S::from_f64(eps);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::zero(); xd.len()];
        let mut xhat = vec![S::zero(); xd.len()];
        let mut rstd = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean: S = row.iter().cloned().sum::<S>() * inv_d;
            let var: S = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + epss).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = gd[c] * xh + bd[c];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let xhat = Tensor::from_vec(sx.clone(), xhat)?;
        self.push(
            Tensor::from_vec(sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            req,
        )
    }

    /// Temperature softmax over the last axis (differentiable).
    pub fn softmax_t(&mut self, x: Var, temp: f64) -> Result<Var, TensorError> {
        if !(temp > 0.0) {
            return Err(TensorError::InvalidParam {
                op: "softmax_t",
                reason: format!("temperature must be > 0, got {temp}"),
            });
        }
        let y = super::softmax_t(self.value(x), temp)?;
        let req = self.requires(x);
        self.push(
            y.clone(),
            Op::SoftmaxT {
                x,
                t: S::from_f64(temp),
                y,
            },
            req,
        )
    }

    /// Mean cross-entropy of logits against fixed target distributions.
    pub fn ce_soft(&mut self, logits: Var, targets: Tensor<S>) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || targets.shape() != sl.as_slice() {
            return Err(TensorError::ShapeMismatch {
                op: "ce_soft",
                lhs: sl,
                rhs: targets.shape().to_vec(),
            });
        }
        let (bsz, k) = (sl[0], sl[1]);
        let xd = self.value(logits).data();
        let mut probs = vec![S::zero(); bsz * k];
        let mut loss = S::zero();
        for r in 0..bsz {
            let row = &xd[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            for c in 0..k {
                probs[r * k + c] = (row[c] - lse).exp();
                loss -= targets.data()[r * k + c] * (row[c] - lse);
            }
        }
        let loss = loss / S::from_f64(bsz as f64);
        let probs = Tensor::from_vec(vec![bsz, k], probs)?;
        let req = self.requires(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CeSoft {
                logits,
                targets,
                probs,
            },
            req,
        )
    }

    /// Per-row log-sum-exp over entries where `mask` is true.
    ///
    /// Every row must have at least one unmasked entry.
    pub fn row_lse_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || mask.len() != sx[0] * sx[1] {
            return Err(TensorError::InvalidShape {
                op: "row_lse_masked",
                shape: sx,
                reason: "mask length must equal matrix size".into(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut lse = vec![S::zero(); rows];
        for r in 0..rows {
            let mut max = S::neg_infinity();
            for c in 0..cols {
                if mask[r * cols + c] {
                    max = max.max(xd[r * cols + c]);
                }
            }
            if max == S::neg_infinity() {
                return Err(TensorError::InvalidParam {
                    op: "row_lse_masked",
                    reason: format!("row {r} has no unmasked entries"),
                });
            }
            let mut s = S::zero();
            for c in 0..cols {
                if mask[r * cols + c] {
                    s += (xd[r * cols + c] - max).exp();
                }
            }
            lse[r] = max + s.ln();
        }
        let req = self.requires(x);
        self.push(
            Tensor::from_vec(vec![rows], lse.clone())?,
            Op::RowLseMasked { x, mask, lse },
            req,
        )
    }

    /// Normalize each row of a matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "l2_normalize_rows",
                shape: sx,
                reason: "expected a matrix".into(),
            });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let floor = S::from_f64(1e-12);
        let mut out = vec![S::zero(); rows * cols];
        let mut norms = vec![S::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let n = row.iter().map(|&v| v * v).sum::<S>().sqrt().max(floor);
            norms[r] = n;
            for c in 0..cols {
                out[r * cols + c] = row[c] / n;
            }
        }
        let y = Tensor::from_vec(sx, out)?;
        let req = self.requires(x);
        self.push(y.clone(), Op::L2NormRows { x, y, norms }, req)
    }

    /// Merge 2x2 patch neighborhoods: `[B, h*w, D] -> [B, (h/2)*(w/2), 4D]`.
    pub fn space_to_depth(&mut self, x: Var, h: usize, w: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != h * w || !h.is_multiple_of(2) || !w.is_multiple_of(2) {
            return Err(TensorError::InvalidShape {
                op: "space_to_depth",
                shape: sx,
                reason: format!("expected [B, {h}*{w}, D] with even grid"),
            });
        }
        let (bsz, d) = (sx[0], sx[2]);
        let xd = self.value(x).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![S::zero(); bsz * ho * wo * 4 * d];
        for bi in 0..bsz {
            for r in 0..ho {
                for c in 0..wo {
                    for q in 0..4 {
                        let (di, dj) = (q / 2, q % 2);
                        let src = ((bi * h + 2 * r + di) * w + 2 * c + dj) * d;
                        let dst = ((bi * ho + r) * wo + c) * 4 * d + q * d;
                        out[dst..dst + d].copy_from_slice(&xd[src..src + d]);
                    }
                }
            }
        }
        let shape = vec![bsz, ho * wo, 4 * d];
        let req = self.requires(x);
        self.push(
            Tensor::from_vec(shape, out)?,
            Op::SpaceToDepth { x, h, w, d, b: bsz },
            req,
        )
    }

    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// node with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
                reason: "loss must be a scalar".into(),
            });
        }
        if !self.value(loss).item().is_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut bufs: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        bufs[loss.0] = Some(vec![S::one(); 1]);

        for id in (0..=loss.0).rev() {
            let g = match bufs[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, &g, &mut bufs);
            bufs[id] = Some(g);
        }

        let grads = bufs
            .into_iter()
            .enumerate()
            .map(|(id, b)| {
                b.filter(|_| self.nodes[id].requires_grad).map(|data| {
                    Tensor::from_vec(self.nodes[id].value.shape().to_vec(), data)
                        .expect("grad shape matches value shape")
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, bufs: &mut [Option<Vec<S>>], v: Var, delta: &[S]) {
        if !self.requires(v) {
            return;
        }
        let slot = &mut bufs[v.0];
        match slot {
            Some(buf) => {
                for (a, &d) in buf.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, id: usize, g: &[S], bufs: &mut [Option<Vec<S>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.requires(*a) {
                    let mut da = vec![S::zero(); batch * m * k];
                    for t in 0..batch {
                        mm_nt(
                            &g[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut da[t * m * k..(t + 1) * m * k],
                        );
                    }
                    self.acc(bufs, *a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![S::zero(); batch * k * n];
                    for t in 0..batch {
                        mm_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[t * k * n..(t + 1) * k * n],
                        );
                    }
                    self.acc(bufs, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.acc(bufs, *a, g);
                self.acc(bufs, *b, g);
            }
            Op::AddBias { x, b } => {
                self.acc(bufs, *x, g);
                if self.requires(*b) {
                    let span = self.value(*b).numel();
                    let mut db = vec![S::zero(); span];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % span] += v;
                    }
                    self.acc(bufs, *b, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bd = self.value(*b).data();
                    let da: Vec<S> = g.iter().zip(bd).map(|(&gv, &bv)| gv * bv).collect();
                    self.acc(bufs, *a, &da);
                }
                if self.requires(*b) {
                    let ad = self.value(*a).data();
                    let db: Vec<S> = g.iter().zip(ad).map(|(&gv, &av)| gv * av).collect();
                    self.acc(bufs, *b, &db);
                }
            }
            Op::Scale { x, c } => {
                let dx: Vec<S> = g.iter().map(|&v| v * *c).collect();
                self.acc(bufs, *x, &dx);
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let dx: Vec<S> = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                self.acc(bufs, *x, &dx);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.value(*x).numel()];
                self.acc(bufs, *x, &dx);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let v = g[0] / S::from_f64(n as f64);
                let dx = vec![v; n];
                self.acc(bufs, *x, &dx);
            }
            Op::MeanAxis { x, axis } => {
                let sx = self.value(*x).shape();
                let outer: usize = sx[..*axis].iter().product();
                let len = sx[*axis];
                let inner: usize = sx[*axis + 1..].iter().product();
                let inv = S::from_f64(1.0 / len as f64);
                let mut dx = vec![S::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = g[o * inner + i] * inv;
                        }
                    }
                }
                self.acc(bufs, *x, &dx);
            }
            Op::Reshape { x } => {
                self.acc(bufs, *x, g);
            }
            Op::SwapAxes { x, a1, a2 } => {
                let gt = Tensor::from_vec(self.nodes[id].value.shape().to_vec(), g.to_vec())
                    .expect("grad shape");
                let dx = swap_axes_raw(&gt, *a1, *a2);
                self.acc(bufs, *x, dx.data());
            }
            Op::ConcatRows { a, b, rows_a } => {
                let cols = self.value(*a).shape()[1];
                self.acc(bufs, *a, &g[..rows_a * cols]);
                self.acc(bufs, *b, &g[rows_a * cols..]);
            }
            Op::GatherRows { x, idx } => {
                if self.requires(*x) {
                    let d = self.value(*x).shape()[1];
                    let mut dx = vec![S::zero(); self.value(*x).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            dx[i * d + c] += g[r * d + c];
                        }
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
            Op::ScatterRows { x, idx } => {
                if self.requires(*x) {
                    let d = self.value(*x).shape()[1];
                    let mut dx = vec![S::zero(); self.value(*x).numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        dx[r * d..(r + 1) * d].copy_from_slice(&g[i * d..(i + 1) * d]);
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *self.value(*x).shape().last().unwrap();
                let rows = self.value(*x).numel() / d;
                let gd = self.value(*gamma).data();
                let xh = xhat.data();
                let inv_d = S::from_f64(1.0 / d as f64);
                if self.requires(*gamma) {
                    let mut dg = vec![S::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            dg[c] += g[r * d + c] * xh[r * d + c];
                        }
                    }
                    self.acc(bufs, *gamma, &dg);
                }
                if self.requires(*beta) {
                    let mut db = vec![S::zero(); d];
                    for r in 0..rows {
                        for c in 0..d {
                            db[c] += g[r * d + c];
                        }
                    }
                    self.acc(bufs, *beta, &db);
                }
                if self.requires(*x) {
                    let mut dx = vec![S::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dxhat = S::zero();
                        let mut mean_dxhat_xhat = S::zero();
                        for c in 0..d {
                            let dxh = g[r * d + c] * gd[c];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xh[r * d + c];
                        }
                        mean_dxhat *= inv_d;
                        mean_dxhat_xhat *= inv_d;
                        for c in 0..d {
                            let dxh = g[r * d + c] * gd[c];
                            dx[r * d + c] =
                                rstd[r] * (dxh - mean_dxhat - xh[r * d + c] * mean_dxhat_xhat);
                        }
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
            Op::SoftmaxT { x, t, y } => {
                if self.requires(*x) {
                    let d = *y.shape().last().unwrap();
                    let rows = y.numel() / d;
                    let yd = y.data();
                    let mut dx = vec![S::zero(); y.numel()];
                    for r in 0..rows {
                        let mut dot = S::zero();
                        for c in 0..d {
                            dot += g[r * d + c] * yd[r * d + c];
                        }
                        for c in 0..d {
                            dx[r * d + c] = yd[r * d + c] * (g[r * d + c] - dot) / *t;
                        }
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
            Op::CeSoft {
                logits,
                targets,
                probs,
            } => {
                if self.requires(*logits) {
                    let (bsz, k) = (probs.shape()[0], probs.shape()[1]);
                    let scale = g[0] / S::from_f64(bsz as f64);
                    let td = targets.data();
                    let pd = probs.data();
                    let mut dx = vec![S::zero(); bsz * k];
                    for r in 0..bsz {
                        let tsum: S = td[r * k..(r + 1) * k].iter().cloned().sum();
                        for c in 0..k {
                            dx[r * k + c] = (pd[r * k + c] * tsum - td[r * k + c]) * scale;
                        }
                    }
                    self.acc(bufs, *logits, &dx);
                }
            }
            Op::RowLseMasked { x, mask, lse } => {
                if self.requires(*x) {
                    let sx = self.value(*x).shape();
                    let (rows, cols) = (sx[0], sx[1]);
                    let xd = self.value(*x).data();
                    let mut dx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            if mask[r * cols + c] {
                                dx[r * cols + c] = (xd[r * cols + c] - lse[r]).exp() * g[r];
                            }
                        }
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
            Op::L2NormRows { x, y, norms } => {
                if self.requires(*x) {
                    let (rows, cols) = (y.shape()[0], y.shape()[1]);
                    let yd = y.data();
                    let mut dx = vec![S::zero(); rows * cols];
                    for r in 0..rows {
                        let mut dot = S::zero();
                        for c in 0..cols {
                            dot += g[r * cols + c] * yd[r * cols + c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] =
                                (g[r * cols + c] - dot * yd[r * cols + c]) / norms[r];
                        }
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
            Op::SpaceToDepth { x, h, w, d, b } => {
                if self.requires(*x) {
                    let (h, w, d, bsz) = (*h, *w, *d, *b);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut dx = vec![S::zero(); bsz * h * w * d];
                    for bi in 0..bsz {
                        for r in 0..ho {
                            for c in 0..wo {
                                for q in 0..4 {
                                    let (di, dj) = (q / 2, q % 2);
                                    let src = ((bi * ho + r) * wo + c) * 4 * d + q * d;
                                    let dst = ((bi * h + 2 * r + di) * w + 2 * c + dj) * d;
                                    dx[dst..dst + d].copy_from_slice(&g[src..src + d]);
                                }
                            }
                        }
                    }
                    self.acc(bufs, *x, &dx);
                }
            }
        }
    }
}

fn op_name<S: Scalar>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Add { .. } => "add",
        Op::AddBias { .. } => "add_bias",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::Relu { .. } => "relu",
        Op::Sum { .. } => "sum",
        Op::Mean { .. } => "mean",
        Op::MeanAxis { .. } => "mean_axis",
        Op::Reshape { .. } => "reshape",
        Op::SwapAxes { .. } => "swap_axes",
        Op::ConcatRows { .. } => "concat_rows",
        Op::GatherRows { .. } => "gather_rows",
        Op::ScatterRows { .. } => "scatter_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxT { .. } => "softmax_t",
        Op::CeSoft { .. } => "ce_soft",
        Op::RowLseMasked { .. } => "row_lse_masked",
        Op::L2NormRows { .. } => "l2_normalize_rows",
        Op::SpaceToDepth { .. } => "space_to_depth",
    }
}

/// C[m,n] += A[m,k] B[k,n]
fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,k] += G[m,n] B[k,n]^T
fn mm_nt<S: Scalar>(g: &[S], b: &[S], m: usize, n: usize, k: usize, out: &mut [S]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = S::zero();
            for j in 0..n {
                s += grow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T G[m,n]
fn mm_tn<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for p in 0..m {
        for i in 0..k {
            let api = a[p * k + i];
            if api == S::zero() {
                continue;
            }
            let grow = &g[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += api * grow[j];
            }
        }
    }
}

fn swap_axes_raw<S: Scalar>(x: &Tensor<S>, a1: usize, a2: usize) -> Tensor<S> {
    if a1 == a2 {
        return x.clone();
    }
    let sx = x.shape();
    let rank = sx.len();
    let mut out_shape = sx.to_vec();
    out_shape.swap(a1, a2);
    let mut strides_in = vec![1usize; rank];
    for d in (0..rank - 1).rev() {
        strides_in[d] = strides_in[d + 1] * sx[d + 1];
    }
    let mut strides_out_in_terms_of_in = strides_in.clone();
    strides_out_in_terms_of_in.swap(a1, a2);
    let n = x.numel();
    let xd = x.data();
    let mut out = vec![S::zero(); n];
    let mut idx = vec![0usize; rank];
    for (flat_out, o) in out.iter_mut().enumerate() {
        // decompose flat_out in out_shape, map through swapped strides
        let mut rem = flat_out;
        for d in 0..rank {
            let sz: usize = out_shape[d + 1..].iter().product();
            idx[d] = rem / sz;
            rem %= sz;
        }
        let mut src = 0;
        for d in 0..rank {
            src += idx[d] * strides_out_in_terms_of_in[d];
        }
        *o = xd[src];
    }
    Tensor::from_vec(out_shape, out).expect("swap_axes preserves element count")
}
