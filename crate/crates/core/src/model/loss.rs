//! Supervised contrastive loss and target construction (mixup + label
//! smoothing).

use crate::geocell::LatLng;
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};
use crate::Rng;
use std::sync::Arc;

/// Result of [`supcon_loss`]: the loss node plus how many anchors had no
/// positive and were skipped.
pub struct SupconOutput {
    pub loss: Var,
    pub skipped_anchors: usize,
}

/// Supervised contrastive loss over `views: [M, D]` (rows L2-normalized,
/// typically M = 2N with an image view and a location view per sample).
///
/// For each anchor i with positive set P(i) (same label, excluding i) and
/// candidate set A(i) (everything except i):
///
/// L_i = -(1/|P(i)|) * sum_{p in P(i)} log( exp(z_i.z_p / tau)
///                                          / sum_{a in A(i)} exp(z_i.z_a / tau) )
///
/// and the loss is the mean over anchors that have at least one positive;
/// anchors without positives are skipped and counted.
pub fn supcon_loss<S: Scalar>(
    g: &mut Graph<S>,
    views: Var,
    labels: &[u32],
    tau: f64,
) -> Result<SupconOutput, TensorError> {
    let shape = g.shape(views).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "supcon_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let m = shape[0];
    if m < 4 {
        return Err(TensorError::InvalidParam {
            op: "supcon_loss",
            reason: format!("need at least 4 views (2 samples), got {m}"),
        });
    }
    if !(tau > 0.0) {
        return Err(TensorError::InvalidParam {
            op: "supcon_loss",
            reason: format!("temperature must be > 0, got {tau}"),
        });
    }
    // rows must arrive unit-norm
    let d = shape[1];
    for (r, row) in g.value(views).data().chunks(d).enumerate() {
        let norm = row
            .iter()
            .map(|&v| v.to_f64_() * v.to_f64_())
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > 1e-4 {
            return Err(TensorError::InvalidParam {
                op: "supcon_loss",
                reason: format!("view {r} has norm {norm}, expected 1"),
            });
        }
    }

    // pairwise logits z_i . z_j / tau
    let vt = g.swap_axes(views, 0, 1)?;
    let sim = g.matmul(views, vt)?;
    let logits = g.scale(sim, 1.0 / tau)?;

    // denominator: log-sum-exp over everything except self
    let offdiag: Arc<Vec<bool>> = Arc::new((0..m * m).map(|i| i / m != i % m).collect());
    let lse = g.row_lse_masked(logits, offdiag)?;

    // numerator: mean positive logit per anchor
    let mut wpos = vec![S::zero(); m * m];
    let mut anchors = 0usize;
    let mut skipped = 0usize;
    let mut anchor_mask = vec![false; m];
    for i in 0..m {
        let pos: Vec<usize> = (0..m)
            .filter(|&p| p != i && labels[p] == labels[i])
            .collect();
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        anchors += 1;
        anchor_mask[i] = true;
        let w = S::from_f64(1.0 / pos.len() as f64);
        for p in pos {
            wpos[i * m + p] = w;
        }
    }
    if anchors == 0 {
        // nothing to contrast; contribute an exact zero
        let zero = g.constant(Tensor::scalar(S::zero()));
        return Ok(SupconOutput {
            loss: zero,
            skipped_anchors: skipped,
        });
    }

    let wpos = g.constant(Tensor::from_vec(vec![m, m], wpos)?);
    let weighted = g.mul(logits, wpos)?;
    let ones = g.constant(Tensor::full(&[m, 1], S::one()));
    let possum = g.matmul(weighted, ones)?; // [m, 1]
    let possum = g.reshape(possum, vec![m])?;

    // mean over valid anchors of (lse - positive mean)
    let neg_pos = g.scale(possum, -1.0)?;
    let per_anchor = g.add(lse, neg_pos)?;
    let inv = 1.0 / anchors as f64;
    let sel: Vec<S> = anchor_mask
        .iter()
        .map(|&a| if a { S::from_f64(inv) } else { S::zero() })
        .collect();
    let sel = g.constant(Tensor::from_vec(vec![m], sel)?);
    let weighted = g.mul(per_anchor, sel)?;
    let loss = g.sum(weighted)?;
    Ok(SupconOutput {
        loss,
        skipped_anchors: skipped,
    })
}

/// A mixed batch ready for the loss: blended images, soft targets, and the
/// dominant (lambda >= 0.5) identity of each sample for contrastive pairing.
pub struct MixedBatch<S: Scalar> {
    pub images: Tensor<S>,
    /// `[B, K]` soft targets after mixup and label smoothing.
    pub targets: Tensor<S>,
    pub lambda: f64,
    pub dominant_labels: Vec<u32>,
    pub dominant_points: Vec<LatLng>,
}

/// Blend a batch with mixup (single Beta(alpha, alpha) draw per batch) and
/// smooth the mixed targets. `alpha <= 0` disables mixing (lambda = 1).
pub fn mix_batch<S: Scalar>(
    images: &Tensor<S>,
    labels: &[u32],
    points: &[LatLng],
    num_classes: usize,
    alpha: f64,
    smoothing: f64,
    rng: &mut Rng,
) -> Result<MixedBatch<S>, TensorError> {
    let b = labels.len();
    debug_assert_eq!(images.shape()[0], b);
    debug_assert_eq!(points.len(), b);
    let lambda = if alpha > 0.0 && b > 1 {
        rng.beta(alpha)
    } else {
        1.0
    };
    let mut perm: Vec<usize> = (0..b).collect();
    if lambda < 1.0 {
        rng.shuffle(&mut perm);
    }

    let stride = images.numel() / b;
    let src = images.data();
    let lam = S::from_f64(lambda);
    let com = S::from_f64(1.0 - lambda);
    let mut mixed = vec![S::zero(); images.numel()];
    for i in 0..b {
        let j = perm[i];
        for t in 0..stride {
            mixed[i * stride + t] = lam * src[i * stride + t] + com * src[j * stride + t];
        }
    }

    let mut targets = vec![S::zero(); b * num_classes];
    for i in 0..b {
        targets[i * num_classes + labels[i] as usize] += lam;
        targets[i * num_classes + labels[perm[i]] as usize] += com;
    }
    if smoothing > 0.0 {
        let eps = S::from_f64(smoothing);
        let fill = S::from_f64(smoothing / num_classes as f64);
        for t in targets.iter_mut() {
            *t = *t * (S::one() - eps) + fill;
        }
    }

    let dominant: Vec<usize> = (0..b)
        .map(|i| if lambda >= 0.5 { i } else { perm[i] })
        .collect();
    Ok(MixedBatch {
        images: Tensor::from_vec(images.shape().to_vec(), mixed)?,
        targets: Tensor::from_vec(vec![b, num_classes], targets)?,
        lambda,
        dominant_labels: dominant.iter().map(|&i| labels[i]).collect(),
        dominant_points: dominant.iter().map(|&i| points[i]).collect(),
    })
}

/// One-hot targets without smoothing (eval loss).
pub fn one_hot<S: Scalar>(labels: &[u32], num_classes: usize) -> Tensor<S> {
    let mut t = vec![S::zero(); labels.len() * num_classes];
    for (i, &l) in labels.iter().enumerate() {
        t[i * num_classes + l as usize] = S::one();
    }
    Tensor::from_vec(vec![labels.len(), num_classes], t).expect("one-hot shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Binding, ParamGroup, ParamSet};

    #[test]
    fn identical_views_single_class_is_ln3() {
        // 2 samples, 1 class, all four views identical unit vectors:
        // every pairwise logit is equal so each positive probability is
        // 1/(2N-1) = 1/3 and the loss is ln 3
        let mut g = Graph::<f64>::new();
        let row = vec![1.0, 0.0, 0.0];
        let views =
            g.constant(Tensor::from_rows(&[row.clone(), row.clone(), row.clone(), row]).unwrap());
        let out = supcon_loss(&mut g, views, &[0, 0, 0, 0], 0.07).unwrap();
        let got = g.value(out.loss).item();
        assert!((got - 3.0f64.ln()).abs() < 1e-5, "got {got}");
        assert_eq!(out.skipped_anchors, 0);
    }

    /// Direct summation oracle, written independently of the graph path.
    fn supcon_reference(views: &[Vec<f64>], labels: &[u32], tau: f64) -> f64 {
        let m = views.len();
        let mut total = 0.0;
        let mut anchors = 0usize;
        for i in 0..m {
            let pos: Vec<usize> = (0..m)
                .filter(|&p| p != i && labels[p] == labels[i])
                .collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let denom: f64 = (0..m)
                .filter(|&a| a != i)
                .map(|a| {
                    (views[i]
                        .iter()
                        .zip(&views[a])
                        .map(|(x, y)| x * y)
                        .sum::<f64>()
                        / tau)
                        .exp()
                })
                .sum();
            let mut li = 0.0;
            for &p in &pos {
                let num = (views[i]
                    .iter()
                    .zip(&views[p])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
                    / tau)
                    .exp();
                li += (num / denom).ln();
            }
            total -= li / pos.len() as f64;
        }
        total / anchors as f64
    }

    #[test]
    fn orthogonal_two_class_matches_brute_force() {
        // 2 classes, identical within class, orthogonal across classes
        let views = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ];
        let labels = [0u32, 1, 0, 1];
        let expect = supcon_reference(&views, &labels, 1.0);

        let mut g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_rows(&views).unwrap());
        let out = supcon_loss(&mut g, v, &labels, 1.0).unwrap();
        let got = g.value(out.loss).item();
        assert!((got - expect).abs() < 1e-6, "got {got}, expect {expect}");
    }

    #[test]
    fn random_case_matches_brute_force_and_gradient() {
        let mut rng = Rng::new(21);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..6 {
            let mut r: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
            rows.push(r);
        }
        let labels = [0u32, 1, 2, 0, 1, 2];
        let expect = supcon_reference(&rows, &labels, 0.5);

        let mut set = ParamSet::<f64>::new();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let raw = set.add(
            "views",
            ParamGroup::Backbone,
            Tensor::from_vec(vec![6, 5], flat).unwrap(),
        );
        let build = |g: &mut Graph<f64>, bind: &mut Binding, set: &ParamSet<f64>| {
            let v = bind.bind(g, set, raw);
            let v = g.l2_normalize_rows(v)?;
            let out = supcon_loss(g, v, &labels, 0.5)?;
            Ok(out.loss)
        };
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let loss = build(&mut g, &mut bind, &set).unwrap();
        assert!((g.value(loss).item() - expect).abs() < 1e-9);

        // gradient of one view against finite differences
        let grads = g.backward(loss).unwrap();
        set.accumulate(&bind, &grads);
        let mut frng = Rng::new(3);
        let report = crate::tensor::finite_diff_check(&mut set, 1e-5, 10, &mut frng, |set| {
            let mut g = Graph::new();
            let mut bind = Binding::new();
            build(&mut g, &mut bind, set).map(|l| g.value(l).item())
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-3, "{}", report.max_rel_err);
    }

    #[test]
    fn permutation_and_rotation_invariance() {
        let mut rng = Rng::new(31);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for _ in 0..6 {
            let mut r: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter_mut().for_each(|v| *v /= n);
            rows.push(r);
        }
        let labels = [0u32, 0, 1, 1, 2, 2];
        let base = supcon_reference(&rows, &labels, 0.3);

        // permute samples
        let perm = [3usize, 1, 5, 0, 2, 4];
        let prows: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
        let plabels: Vec<u32> = perm.iter().map(|&i| labels[i]).collect();
        let permuted = supcon_reference(&prows, &plabels, 0.3);
        assert!((base - permuted).abs() < 1e-12);

        // rotate all views by a common orthogonal map (Givens rotation)
        let (c, s) = (0.6f64, 0.8f64);
        let rrows: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| vec![c * r[0] - s * r[1], s * r[0] + c * r[1], r[2], r[3]])
            .collect();
        let rotated = supcon_reference(&rrows, &labels, 0.3);
        assert!((base - rotated).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_views_rejected() {
        let mut g = Graph::<f64>::new();
        let views = g.constant(
            Tensor::from_rows(&[
                vec![2.0, 0.0],
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.0, 1.0],
            ])
            .unwrap(),
        );
        let err = match supcon_loss(&mut g, views, &[0, 0, 1, 1], 0.07) {
            Err(e) => e,
            Ok(_) => panic!("unnormalized views must be rejected"),
        };
        assert!(err.to_string().contains("norm"));
    }

    #[test]
    fn anchors_without_positives_are_skipped() {
        let mut g = Graph::<f64>::new();
        let views = g.constant(
            Tensor::from_rows(&[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
                vec![0.0, -1.0],
            ])
            .unwrap(),
        );
        // labels all distinct: every anchor is skipped, loss contributes zero
        let out = supcon_loss(&mut g, views, &[0, 1, 2, 3], 0.07).unwrap();
        assert_eq!(out.skipped_anchors, 4);
        assert_eq!(g.value(out.loss).item(), 0.0);
    }

    #[test]
    fn mixup_identity_at_lambda_one() {
        let mut rng = Rng::new(4);
        let images = Tensor::<f64>::randn(&[2, 1, 2, 2], 1.0, &mut rng);
        let pts = [
            LatLng::new(0.0, 0.0).unwrap(),
            LatLng::new(10.0, 10.0).unwrap(),
        ];
        // alpha = 0 disables mixing entirely
        let mixed = mix_batch(&images, &[0, 1], &pts, 3, 0.0, 0.0, &mut rng).unwrap();
        assert_eq!(mixed.lambda, 1.0);
        assert_eq!(mixed.images.data(), images.data());
        assert_eq!(mixed.dominant_labels, vec![0, 1]);
        // targets are exact one-hots
        assert_eq!(mixed.targets.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn smoothed_targets_sum_to_one() {
        let mut rng = Rng::new(6);
        let images = Tensor::<f64>::randn(&[4, 1, 2, 2], 1.0, &mut rng);
        let pts = vec![LatLng::new(0.0, 0.0).unwrap(); 4];
        let mixed = mix_batch(&images, &[0, 1, 2, 0], &pts, 4, 0.1, 0.05, &mut rng).unwrap();
        for row in mixed.targets.data().chunks(4) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0), "smoothing floors all classes");
        }
    }

    #[test]
    fn label_smoothing_bounds_ce_away_from_zero() {
        // with smoothing eps the CE floor is the smoothed target's entropy;
        // a very confident prediction cannot dip below it
        let (k, eps) = (5usize, 0.05f64);
        let t_max = 1.0 - eps + eps / k as f64;
        let t_min = eps / k as f64;
        let floor = -(t_max * t_max.ln() + (k as f64 - 1.0) * t_min * t_min.ln());

        let mut g = Graph::<f64>::new();
        let mut logits = vec![0.0; k];
        logits[2] = 30.0; // extremely confident
        let lv = g.constant(Tensor::from_vec(vec![1, k], logits).unwrap());
        let mut targets = vec![t_min; k];
        targets[2] = t_max;
        let loss = g
            .ce_soft(lv, Tensor::from_vec(vec![1, k], targets).unwrap())
            .unwrap();
        let ce = g.value(loss).item();
        assert!(ce >= floor - 1e-9, "ce {ce} below floor {floor}");
        // and the floor itself is strictly positive
        assert!(floor > 0.0);
    }
}
