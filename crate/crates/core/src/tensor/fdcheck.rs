//! Central finite-difference verification of analytic gradients.

use super::{ParamSet, Scalar, TensorError};
use crate::Rng;

/// Result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct FdReport {
    /// max over sampled coordinates of |analytic - numeric| / max(1, |analytic|)
    pub max_rel_err: f64,
    /// coordinate with the worst error, as (param name, flat index)
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Compare analytic gradients stored in `params` against central differences
/// of `loss_fn`.
///
/// `params` must already hold the analytic gradient of the same loss (run a
/// forward/backward first). `loss_fn` must be deterministic and scalar.
/// Checks up to `coords_per_param` randomly sampled coordinates of each
/// non-frozen parameter.
pub fn finite_diff_check<S: Scalar>(
    params: &mut ParamSet<S>,
    eps: f64,
    coords_per_param: usize,
    rng: &mut Rng,
    mut loss_fn: impl FnMut(&ParamSet<S>) -> Result<S, TensorError>,
) -> Result<FdReport, TensorError> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::InvalidParam {
            op: "finite_diff_check",
            reason: format!("eps must be in [1e-7, 1e-3], got {eps}"),
        });
    }
    let base = loss_fn(params)?;
    if !base.is_finite() {
        return Err(TensorError::NonFinite {
            op: "finite_diff_check",
        });
    }

    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(id, _)| id)
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    let mut checked = 0usize;
    for id in ids {
        let n = params.get(id).value.numel();
        let coords: Vec<usize> = if n <= coords_per_param {
            (0..n).collect()
        } else {
            (0..coords_per_param).map(|_| rng.below(n)).collect()
        };
        for c in coords {
            let original = params.get(id).value.data()[c];
            let analytic = params.get(id).grad.data()[c].to_f64_();

            let orig_f64 = original.to_f64_();
            params.get_mut(id).value = params
                .get(id)
                .value
                .with_coord(c, S::from_f64(orig_f64 + eps));
            let plus = loss_fn(params)?.to_f64_();
            params.get_mut(id).value = params
                .get(id)
                .value
                .with_coord(c, S::from_f64(orig_f64 - eps));
            let minus = loss_fn(params)?.to_f64_();
            params.get_mut(id).value = params.get(id).value.with_coord(c, original);

            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_diff_check",
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((params.get(id).name.clone(), c));
            }
            checked += 1;
        }
    }
    Ok(FdReport {
        max_rel_err,
        worst,
        coords_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Binding, Graph, ParamGroup, Tensor};

    #[test]
    fn linear_loss_grad_is_exact() {
        // loss = sum(x): analytic gradient is all ones
        let mut set = ParamSet::<f64>::new();
        let x = set.add(
            "x",
            ParamGroup::Backbone,
            Tensor::from_vec(vec![3], vec![0.3, -1.2, 7.0]).unwrap(),
        );
        let run = |set: &ParamSet<f64>| {
            let mut g = Graph::new();
            let mut bind = Binding::new();
            let v = bind.bind(&mut g, set, x);
            let s = g.sum(v)?;
            Ok((g, bind, s))
        };
        let (g, bind, s) = run(&set).unwrap();
        let grads = g.backward(s).unwrap();
        set.accumulate(&bind, &grads);
        assert_eq!(set.get(x).grad.data(), &[1.0, 1.0, 1.0]);

        let mut rng = Rng::new(0);
        let report = finite_diff_check(&mut set, 1e-5, 8, &mut rng, |set| {
            let (g, _, s) = run(set)?;
            Ok(g.value(s).item())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-9, "{}", report.max_rel_err);
    }

    #[test]
    fn quadratic_loss_matches_closed_form() {
        // loss = sum(x^2) at x = [1, 2] has gradient [2, 4]
        let mut set = ParamSet::<f64>::new();
        let x = set.add(
            "x",
            ParamGroup::Backbone,
            Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(),
        );
        let run = |set: &ParamSet<f64>| {
            let mut g = Graph::new();
            let mut bind = Binding::new();
            let v = bind.bind(&mut g, set, x);
            let sq = g.mul(v, v)?;
            let s = g.sum(sq)?;
            Ok((g, bind, s))
        };
        let (g, bind, s) = run(&set).unwrap();
        let grads = g.backward(s).unwrap();
        set.accumulate(&bind, &grads);
        assert!((set.get(x).grad.data()[0] - 2.0).abs() < 1e-12);
        assert!((set.get(x).grad.data()[1] - 4.0).abs() < 1e-12);

        let mut rng = Rng::new(0);
        let report = finite_diff_check(&mut set, 1e-5, 8, &mut rng, |set| {
            let (g, _, s) = run(set)?;
            Ok(g.value(s).item())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "{}", report.max_rel_err);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let mut set = ParamSet::<f64>::new();
        set.add("x", ParamGroup::Backbone, Tensor::zeros(&[1]));
        let mut rng = Rng::new(0);
        let err = finite_diff_check(&mut set, 1e-2, 4, &mut rng, |_| Ok(0.0));
        assert!(err.is_err());
    }
}
