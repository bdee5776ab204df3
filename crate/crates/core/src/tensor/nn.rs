//! Neural-net composites over the op tape: linear layers and multi-head
//! self-attention, plus their parameter bundles.

use super::{Binding, Graph, ParamGroup, ParamId, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::Rng;

/// Weight + bias pair for an affine map.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    /// Fresh linear parameters, W ~ N(0, 1/d_in), b = 0.
    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut Rng,
    ) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        let w = set.add(
            format!("{name}.w"),
            group,
            Tensor::randn(&[d_in, d_out], scale, rng),
        );
        let b = set.add(format!("{name}.b"), group, Tensor::zeros(&[d_out]));
        Self { w, b }
    }
}

/// y = xW + b for `x: [B, d_in]`.
pub fn linear<S: Scalar>(
    g: &mut Graph<S>,
    bind: &mut Binding,
    set: &ParamSet<S>,
    x: Var,
    p: LinearParams,
) -> Result<Var, TensorError> {
    let w = bind.bind(g, set, p.w);
    let b = bind.bind(g, set, p.b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Gamma/beta pair for layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init<S: Scalar>(set: &mut ParamSet<S>, name: &str, group: ParamGroup, d: usize) -> Self {
        let gamma = set.add(format!("{name}.gamma"), group, Tensor::full(&[d], S::one()));
        let beta = set.add(format!("{name}.beta"), group, Tensor::zeros(&[d]));
        Self { gamma, beta }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn layer_norm<S: Scalar>(
    g: &mut Graph<S>,
    bind: &mut Binding,
    set: &ParamSet<S>,
    x: Var,
    p: NormParams,
) -> Result<Var, TensorError> {
    let gamma = bind.bind(g, set, p.gamma);
    let beta = bind.bind(g, set, p.beta);
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

/// Inverted-scaling dropout mask: entries are 0 with probability `rate`,
/// otherwise 1/(1-rate). Multiplying by this mask at train time keeps the
/// activation expectation unchanged; eval skips the mask entirely.
pub fn dropout_mask<S: Scalar>(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor<S> {
    debug_assert!((0.0..1.0).contains(&rate));
    let keep = S::from_f64(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data: Vec<S> = (0..n)
        .map(|_| {
            if rng.uniform() < rate {
                S::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape matches data")
}

/// Query/key/value/output projections of one attention layer.
#[derive(Debug, Clone, Copy)]
pub struct MhsaParams {
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub heads: usize,
}

impl MhsaParams {
    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::InvalidParam {
                op: "mhsa",
                reason: format!("dim {dim} not divisible by heads {heads}"),
            });
        }
        Ok(Self {
            wq: LinearParams::init(set, &format!("{name}.wq"), group, dim, dim, rng),
            wk: LinearParams::init(set, &format!("{name}.wk"), group, dim, dim, rng),
            wv: LinearParams::init(set, &format!("{name}.wv"), group, dim, dim, rng),
            wo: LinearParams::init(set, &format!("{name}.wo"), group, dim, dim, rng),
            heads,
        })
    }
}

/// Scaled dot-product multi-head self-attention over `x: [B, P, D]`.
///
/// No positional term lives inside this op, so permuting patches permutes
/// the outputs identically.
pub fn mhsa<S: Scalar>(
    g: &mut Graph<S>,
    bind: &mut Binding,
    set: &ParamSet<S>,
    x: Var,
    p: &MhsaParams,
) -> Result<Var, TensorError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "mhsa",
            shape,
            reason: "expected [B, P, D]".into(),
        });
    }
    let (bsz, pn, d) = (shape[0], shape[1], shape[2]);
    if d % p.heads != 0 {
        return Err(TensorError::InvalidParam {
            op: "mhsa",
            reason: format!("dim {d} not divisible by heads {}", p.heads),
        });
    }
    let dh = d / p.heads;

    let flat = g.reshape(x, vec![bsz * pn, d])?;
    let q = linear(g, bind, set, flat, p.wq)?;
    let k = linear(g, bind, set, flat, p.wk)?;
    let v = linear(g, bind, set, flat, p.wv)?;

    // [B*P, D] -> [B, H, P, dh]
    let split = |g: &mut Graph<S>, t: Var| -> Result<Var, TensorError> {
        let t = g.reshape(t, vec![bsz, pn, p.heads, dh])?;
        g.swap_axes(t, 1, 2)
    };
    let q = split(g, q)?;
    let k = split(g, k)?;
    let v = split(g, v)?;

    let kt = g.swap_axes(k, 2, 3)?; // [B, H, dh, P]
    let scores = g.matmul(q, kt)?; // [B, H, P, P]
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let attn = g.softmax_t(scores, 1.0)?;
    let ctx = g.matmul(attn, v)?; // [B, H, P, dh]
    let ctx = g.swap_axes(ctx, 1, 2)?; // [B, P, H, dh]
    let ctx = g.reshape(ctx, vec![bsz * pn, d])?;
    let out = linear(g, bind, set, ctx, p.wo)?;
    g.reshape(out, vec![bsz, pn, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval_graph<S: Scalar>() -> (Graph<S>, Binding) {
        (Graph::new(), Binding::new())
    }

    #[test]
    fn linear_identity() {
        let mut set = ParamSet::<f64>::new();
        let w = set.add(
            "w",
            ParamGroup::Backbone,
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        );
        let b = set.add("b", ParamGroup::Backbone, Tensor::zeros(&[2]));
        let p = LinearParams { w, b };
        let (mut g, mut bind) = eval_graph();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = linear(&mut g, &mut bind, &set, x, p).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn linear_hand_matrix_multiply() {
        // oracle: [[1,0],[0,1]] @ [[3,4],[5,6]] + [1,1] worked by hand
        let mut set = ParamSet::<f64>::new();
        let w = set.add(
            "w",
            ParamGroup::Backbone,
            Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        );
        let b = set.add(
            "b",
            ParamGroup::Backbone,
            Tensor::from_vec(vec![2], vec![1.0, 1.0]).unwrap(),
        );
        let p = LinearParams { w, b };
        let (mut g, mut bind) = eval_graph();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = linear(&mut g, &mut bind, &set, x, p).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut set = ParamSet::<f64>::new();
        let p = LinearParams::init(&mut set, "l", ParamGroup::Backbone, 3, 2, &mut Rng::new(0));
        let (mut g, mut bind) = eval_graph();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let err = linear(&mut g, &mut bind, &set, x, p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 4]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn mhsa_single_patch_is_value_projection() {
        // with P=1 attention weights are forced to [1], so the output is just
        // Wo(Wv(x)) regardless of q/k
        let mut set = ParamSet::<f64>::new();
        let mut rng = Rng::new(5);
        let p = MhsaParams::init(&mut set, "attn", ParamGroup::Backbone, 4, 2, &mut rng).unwrap();
        let x_t = Tensor::randn(&[1, 1, 4], 1.0, &mut rng);

        let (mut g, mut bind) = eval_graph();
        let x = g.constant(x_t.clone());
        let y = mhsa(&mut g, &mut bind, &set, x, &p).unwrap();

        let (mut g2, mut bind2) = eval_graph();
        let x2 = g2.constant(x_t.reshaped(vec![1, 4]).unwrap());
        let v = linear(&mut g2, &mut bind2, &set, x2, p.wv).unwrap();
        let o = linear(&mut g2, &mut bind2, &set, v, p.wo).unwrap();

        let a = g.value(y).data().to_vec();
        let b = g2.value(o).data().to_vec();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mhsa_permutation_equivariance() {
        let mut set = ParamSet::<f64>::new();
        let mut rng = Rng::new(9);
        let p = MhsaParams::init(&mut set, "attn", ParamGroup::Backbone, 4, 2, &mut rng).unwrap();
        let x_t = Tensor::randn(&[1, 3, 4], 1.0, &mut rng);

        let (mut g, mut bind) = eval_graph();
        let x = g.constant(x_t.clone());
        let y = mhsa(&mut g, &mut bind, &set, x, &p).unwrap();
        let y = g.value(y).clone();

        // permute patches 0->2, 1->0, 2->1
        let perm = [2usize, 0, 1];
        let mut pd = vec![0.0f64; 12];
        for (dst, &src) in perm.iter().enumerate() {
            pd[dst * 4..(dst + 1) * 4].copy_from_slice(&x_t.data()[src * 4..(src + 1) * 4]);
        }
        let (mut g2, mut bind2) = eval_graph();
        let xp = g2.constant(Tensor::from_vec(vec![1, 3, 4], pd).unwrap());
        let yp = mhsa(&mut g2, &mut bind2, &set, xp, &p).unwrap();
        let yp = g2.value(yp).clone();

        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                let a = yp.data()[dst * 4 + c];
                let b = y.data()[src * 4 + c];
                assert!((a - b).abs() < 1e-12, "patch {dst} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mhsa_rejects_indivisible_heads() {
        let mut set = ParamSet::<f64>::new();
        let err = MhsaParams::init(&mut set, "a", ParamGroup::Backbone, 5, 2, &mut Rng::new(0));
        assert!(err.is_err());
    }
}
