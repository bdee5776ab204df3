//! AdamW training loop with warmup/cosine schedule, mixup, label smoothing
//! and the location-contrastive auxiliary term.

use super::loss::{mix_batch, one_hot, supcon_loss};
use super::{ForwardOpts, ForwardPass, Model, ModelError};
use crate::geocell::LatLng;
use crate::tensor::{ParamGroup, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One labelled, geotagged image.
#[derive(Debug, Clone)]
pub struct TrainSample<S: Scalar> {
    pub id: u64,
    /// `[C, H, W]`
    pub image: Tensor<S>,
    pub label: u32,
    pub location: LatLng,
}

/// Which blocks contribute contrastive terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocBlocks {
    All,
    LastTwo,
    None,
}

impl LocBlocks {
    /// Does `block` (of `total`) participate?
    fn selects(self, block: usize, total: usize) -> bool {
        match self {
            LocBlocks::All => true,
            LocBlocks::LastTwo => block + 2 >= total,
            LocBlocks::None => false,
        }
    }
}

/// Per-group peak learning rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroupLrs {
    pub experts: f64,
    pub head: f64,
    pub backbone: f64,
    pub loc_proj: f64,
}

impl Default for GroupLrs {
    /// Expert fine-tuning rates: experts fast, pretrained head slow.
    fn default() -> Self {
        Self {
            experts: 1e-3,
            head: 1e-6,
            backbone: 1e-4,
            loc_proj: 1e-4,
        }
    }
}

impl GroupLrs {
    /// From-scratch dense training: one flat rate; the 1e-6 head rate only
    /// makes sense when fine-tuning an already-trained head.
    pub fn dense_phase() -> Self {
        Self {
            experts: 1e-3,
            head: 1e-4,
            backbone: 1e-4,
            loc_proj: 1e-4,
        }
    }

    pub fn of(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Experts => self.experts,
            ParamGroup::Head => self.head,
            ParamGroup::Backbone => self.backbone,
            ParamGroup::LocProj => self.loc_proj,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub lrs: GroupLrs,
    pub mixup_alpha: f64,
    pub label_smoothing: f64,
    pub classifier_dropout: f64,
    pub contrastive_weight: f64,
    pub contrastive_temperature: f64,
    pub loc_blocks: LocBlocks,
    /// Train the location encoder for this many epochs, then freeze it.
    /// 0 freezes it from the start.
    pub encoder_warm_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            warmup_epochs: 40,
            weight_decay: 1e-8,
            lrs: GroupLrs::default(),
            mixup_alpha: 0.1,
            label_smoothing: 0.05,
            classifier_dropout: 0.1,
            contrastive_weight: 0.01,
            contrastive_temperature: 0.07,
            loc_blocks: LocBlocks::All,
            encoder_warm_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Invalid(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        if self.weight_decay < 0.0
            || self.mixup_alpha < 0.0
            || self.label_smoothing < 0.0
            || self.contrastive_weight < 0.0
        {
            return Err(TrainError::Invalid("weights must be >= 0".into()));
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(TrainError::Invalid(
                "contrastive temperature must be > 0".into(),
            ));
        }
        for (name, lr) in [
            ("experts", self.lrs.experts),
            ("head", self.lrs.head),
            ("backbone", self.lrs.backbone),
            ("loc_proj", self.lrs.loc_proj),
        ] {
            if lr < 0.0 {
                return Err(TrainError::Invalid(format!("lr {name} must be >= 0")));
            }
        }
        Ok(())
    }

    /// Learning-rate multiplier for an epoch: linear warmup from 0.8 of peak
    /// to peak over `warmup_epochs`, then cosine back down to 0.8 of peak at
    /// the final epoch.
    pub fn lr_scale(&self, epoch: usize) -> f64 {
        const FLOOR: f64 = 0.8;
        if self.warmup_epochs > 0 && epoch < self.warmup_epochs {
            return FLOOR + (1.0 - FLOOR) * (epoch as f64 / self.warmup_epochs as f64);
        }
        let span = self.epochs.saturating_sub(self.warmup_epochs);
        if span <= 1 {
            return 1.0;
        }
        let progress = (epoch - self.warmup_epochs) as f64 / (span - 1) as f64;
        FLOOR + (1.0 - FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay. Parameters that are frozen or whose
/// group rate is zero are skipped entirely, leaving their bytes untouched.
pub struct AdamW<S: Scalar> {
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
    step_count: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step(&mut self, set: &mut ParamSet<S>, lrs: &GroupLrs, scale: f64) {
        self.step_count += 1;
        let n = set.len();
        self.m.resize(n, None);
        self.v.resize(n, None);
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::from_f64(self.beta1), S::from_f64(self.beta2));
        let (nb1, nb2) = (S::from_f64(1.0 - self.beta1), S::from_f64(1.0 - self.beta2));

        for (idx, (_, p)) in set.iter_mut().enumerate() {
            let lr = lrs.of(p.group) * scale;
            if p.frozen || lr <= 0.0 {
                continue;
            }
            let m = self.m[idx].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v[idx].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let g = p.grad.data();
            let mut new_m = Vec::with_capacity(g.len());
            let mut new_v = Vec::with_capacity(g.len());
            let mut new_val = Vec::with_capacity(g.len());
            let lr_s = S::from_f64(lr);
            let wd = S::from_f64(self.weight_decay);
            let eps = S::from_f64(self.eps);
            let ibc1 = S::from_f64(1.0 / bc1);
            let ibc2 = S::from_f64(1.0 / bc2);
            for ((&gi, &mi), (&vi, &xi)) in g
                .iter()
                .zip(m.data())
                .zip(v.data().iter().zip(p.value.data()))
            {
                let mi = b1 * mi + nb1 * gi;
                let vi = b2 * vi + nb2 * gi * gi;
                let mhat = mi * ibc1;
                let vhat = vi * ibc2;
                new_m.push(mi);
                new_v.push(vi);
                new_val.push(xi - lr_s * (mhat / (vhat.sqrt() + eps) + wd * xi));
            }
            *m = Tensor::from_vec(p.value.shape().to_vec(), new_m).expect("moment shape");
            *v = Tensor::from_vec(p.value.shape().to_vec(), new_v).expect("moment shape");
            p.value = Tensor::from_vec(p.value.shape().to_vec(), new_val).expect("value shape");
        }
    }
}

/// Sum of all loss terms plus the values of each.
pub struct LossBreakdown<S: Scalar> {
    pub total: Var,
    pub ce: f64,
    pub contrastive: f64,
    pub skipped_anchors: usize,
    _marker: std::marker::PhantomData<S>,
}

/// Build the full training objective on the forward graph:
/// cross-entropy against soft targets plus `contrastive_weight` times the
/// per-layer supervised contrastive terms for the selected blocks.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar>(
    model: &Model<S>,
    fp: &mut ForwardPass<S>,
    targets: &Tensor<S>,
    contrast_labels: &[u32],
    contrast_points: &[LatLng],
    cfg: &TrainConfig,
    train: bool,
    rng: &mut Rng,
) -> Result<LossBreakdown<S>, TrainError> {
    let g = &mut fp.graph;
    let bind = &mut fp.binding;
    let ce = g.ce_soft(fp.logits, targets.clone())?;
    let ce_value = g.value(ce).item().to_f64_();

    let num_blocks = model.cfg.blocks.len();
    let want_contrast =
        cfg.contrastive_weight > 0.0 && cfg.loc_blocks != LocBlocks::None && fp.batch >= 2;
    let mut total = ce;
    let mut contrastive = 0.0;
    let mut skipped = 0usize;
    if want_contrast {
        // one encoder pass, one raw projector output per participating block
        let emb = model
            .loc
            .encoder
            .encode_batch(g, bind, &model.params, contrast_points)?;
        let mut block_proj: BTreeMap<usize, Var> = BTreeMap::new();

        let mut acc: Option<Var> = None;
        for (layer_idx, layer) in model.layers.iter().enumerate() {
            if !cfg.loc_blocks.selects(layer.block, num_blocks) {
                continue;
            }
            let f = fp.pre_mlp[layer_idx].ok_or_else(|| {
                TrainError::Invalid("total_loss needs a hooked forward pass".into())
            })?;
            let loc_raw = match block_proj.get(&layer.block) {
                Some(&v) => v,
                None => {
                    let proj = &model.loc.projectors[layer.block];
                    let p = proj.project(g, bind, &model.params, emb, train, rng)?;
                    block_proj.insert(layer.block, p);
                    p
                }
            };
            let img_raw = g.mean_axis(f, 1)?;

            // a ReLU + dropout head can zero a view outright; such samples
            // cannot be normalized onto the sphere and are skipped, like
            // anchors without positives
            let row_norm = |t: &Tensor<S>, r: usize| -> f64 {
                let d = t.shape()[1];
                t.data()[r * d..(r + 1) * d]
                    .iter()
                    .map(|&v| v.to_f64_() * v.to_f64_())
                    .sum::<f64>()
                    .sqrt()
            };
            let kept: Vec<usize> = (0..fp.batch)
                .filter(|&i| {
                    row_norm(g.value(img_raw), i) > 1e-8 && row_norm(g.value(loc_raw), i) > 1e-8
                })
                .collect();
            skipped += 2 * (fp.batch - kept.len());
            if kept.len() < 2 {
                continue;
            }
            let (img_raw, loc_raw) = if kept.len() == fp.batch {
                (img_raw, loc_raw)
            } else {
                let idx = std::sync::Arc::new(kept.clone());
                (
                    g.gather_rows(img_raw, std::sync::Arc::clone(&idx))?,
                    g.gather_rows(loc_raw, idx)?,
                )
            };
            let img_view = g.l2_normalize_rows(img_raw)?;
            let loc_view = g.l2_normalize_rows(loc_raw)?;
            let views = g.concat_rows(img_view, loc_view)?;
            let mut labels2: Vec<u32> = kept.iter().map(|&i| contrast_labels[i]).collect();
            labels2.extend(kept.iter().map(|&i| contrast_labels[i]));
            let out = supcon_loss(g, views, &labels2, cfg.contrastive_temperature)?;
            contrastive += g.value(out.loss).item().to_f64_();
            skipped += out.skipped_anchors;
            acc = Some(match acc {
                None => out.loss,
                Some(prev) => g.add(prev, out.loss)?,
            });
        }
        if let Some(sup_total) = acc {
            let weighted = g.scale(sup_total, cfg.contrastive_weight)?;
            total = g.add(ce, weighted)?;
        }
    }

    Ok(LossBreakdown {
        total,
        ce: ce_value,
        contrastive,
        skipped_anchors: skipped,
        _marker: std::marker::PhantomData,
    })
}

/// One line of the training log (CSV: epoch,split,loss,acc,lr).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub diverged: bool,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,acc,lr\n");
        for l in &self.log {
            out.push_str(&format!(
                "{},{},{:.6},{:.4},{:.8}\n",
                l.epoch, l.split, l.loss, l.acc, l.lr
            ));
        }
        out
    }
}

fn stack_images<S: Scalar>(samples: &[&TrainSample<S>]) -> Tensor<S> {
    let per = samples[0].image.numel();
    let mut data = Vec::with_capacity(per * samples.len());
    for s in samples {
        data.push(s.image.data());
    }
    let flat: Vec<S> = data.into_iter().flatten().copied().collect();
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(samples[0].image.shape());
    Tensor::from_vec(shape, flat).expect("stacked batch shape")
}

/// Eval-mode metrics over a sample set.
pub struct EvalResult {
    /// Plain cross-entropy (no mixup, no smoothing).
    pub loss: f64,
    /// Top-1 accuracy in percent.
    pub accuracy: f64,
    /// class -> (correct, total)
    pub per_class: BTreeMap<u32, (usize, usize)>,
    pub predictions: Vec<u32>,
}

pub fn evaluate<S: Scalar>(
    model: &Model<S>,
    samples: &[TrainSample<S>],
    batch_size: usize,
) -> Result<EvalResult, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Invalid("evaluate on empty sample set".into()));
    }
    let mut rng = Rng::new(0); // eval path draws nothing
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainSample<S>> = chunk.iter().collect();
        let images = stack_images(&refs);
        let labels: Vec<u32> = chunk.iter().map(|s| s.label).collect();
        let mut fp = model.forward(&images, &ForwardOpts::eval(), &mut rng)?;
        let targets = one_hot::<S>(&labels, model.cfg.num_classes);
        let ce = fp.graph.ce_soft(fp.logits, targets)?;
        loss_sum += fp.graph.value(ce).item().to_f64_() * chunk.len() as f64;
        let preds = fp.predictions();
        for (p, s) in preds.iter().zip(chunk) {
            let e = per_class.entry(s.label).or_insert((0, 0));
            e.1 += 1;
            if *p == s.label {
                e.0 += 1;
                correct += 1;
            }
        }
        predictions.extend(preds);
    }
    Ok(EvalResult {
        loss: loss_sum / samples.len() as f64,
        accuracy: 100.0 * correct as f64 / samples.len() as f64,
        per_class,
        predictions,
    })
}

/// Full training loop. The model is left holding the best-validation
/// parameters; the report carries the per-epoch log.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_set: &[TrainSample<S>],
    val_set: &[TrainSample<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Invalid("empty training set".into()));
    }
    if val_set.is_empty() {
        return Err(TrainError::Invalid("empty validation set".into()));
    }

    let root = Rng::new(cfg.seed);
    let mut shuffle_rng = root.derive(1);
    let mut batch_rng = root.derive(2);
    let mut opt = AdamW::new(cfg.weight_decay);

    let mut log = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    // last good checkpoint: starts as the initial weights so a first-epoch
    // divergence still leaves a usable model
    let mut best_params: Option<ParamSet<S>> = Some(model.params.clone());
    let mut diverged = false;

    'epochs: for epoch in 0..cfg.epochs {
        if epoch == cfg.encoder_warm_epochs {
            model.loc.encoder.set_frozen(&mut model.params, true);
        }
        let scale = cfg.lr_scale(epoch);
        let lr_logged = cfg.lrs.backbone * scale;
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&TrainSample<S>> = chunk.iter().map(|&i| &train_set[i]).collect();
            let images = stack_images(&refs);
            let labels: Vec<u32> = refs.iter().map(|s| s.label).collect();
            let points: Vec<LatLng> = refs.iter().map(|s| s.location).collect();
            let mixed = mix_batch(
                &images,
                &labels,
                &points,
                model.cfg.num_classes,
                cfg.mixup_alpha,
                cfg.label_smoothing,
                &mut batch_rng,
            )?;

            let opts = ForwardOpts {
                train: true,
                hooks: true,
                trace: false,
                classifier_dropout: cfg.classifier_dropout,
            };
            // exploded weights surface as a NonFinite op error anywhere in
            // the graph; treat that as divergence, not a hard failure
            let step = (|| -> Result<_, TrainError> {
                let mut fp = model.forward(&mixed.images, &opts, &mut batch_rng)?;
                let breakdown = total_loss(
                    model,
                    &mut fp,
                    &mixed.targets,
                    &mixed.dominant_labels,
                    &mixed.dominant_points,
                    cfg,
                    true,
                    &mut batch_rng,
                )?;
                Ok((fp, breakdown))
            })();
            let (fp, breakdown) = match step {
                Ok(v) => v,
                Err(TrainError::Tensor(TensorError::NonFinite { .. }))
                | Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let loss_val = fp.graph.value(breakdown.total).item().to_f64_();
            if !loss_val.is_finite() {
                diverged = true;
                break 'epochs;
            }
            loss_sum += loss_val * refs.len() as f64;
            for (p, s) in fp.predictions().iter().zip(&mixed.dominant_labels) {
                if p == s {
                    correct += 1;
                }
            }

            let grads = match fp.graph.backward(breakdown.total) {
                Ok(g) => g,
                Err(TensorError::NonFinite { .. }) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e.into()),
            };
            model.params.zero_grads();
            model.params.accumulate(&fp.binding, &grads);
            opt.step(&mut model.params, &cfg.lrs, scale);
        }

        let train_loss = loss_sum / train_set.len() as f64;
        let train_acc = 100.0 * correct as f64 / train_set.len() as f64;
        log.push(EpochLog {
            epoch,
            split: "train".into(),
            loss: train_loss,
            acc: train_acc,
            lr: lr_logged,
        });

        let val = match evaluate(model, val_set, cfg.batch_size) {
            Ok(v) => v,
            Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite { .. }))) => {
                diverged = true;
                break 'epochs;
            }
            Err(e) => return Err(e),
        };
        log.push(EpochLog {
            epoch,
            split: "val".into(),
            loss: val.loss,
            acc: val.accuracy,
            lr: lr_logged,
        });
        if val.accuracy > best_val_acc {
            best_val_acc = val.accuracy;
            best_epoch = epoch;
            best_params = Some(model.params.clone());
        }
    }

    // leave the model at its best validation point (also the recovery path
    // after divergence)
    if let Some(best) = best_params {
        model.params = best;
    }
    Ok(TrainReport {
        log,
        best_val_acc: best_val_acc.max(0.0),
        best_epoch,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::model::Model;

    #[test]
    fn lr_schedule_endpoints() {
        let cfg = TrainConfig {
            epochs: 60,
            warmup_epochs: 40,
            ..TrainConfig::default()
        };
        assert!((cfg.lr_scale(0) - 0.8).abs() < 1e-12, "epoch 0 is 0.8 peak");
        assert!(
            (cfg.lr_scale(40) - 1.0).abs() < 1e-12,
            "end of warmup is peak"
        );
        let last = cfg.lr_scale(59);
        assert!(
            (last - 0.8).abs() < 1e-9,
            "final epoch back to 0.8, got {last}"
        );
        // monotone through warmup
        for e in 1..=40 {
            assert!(cfg.lr_scale(e) >= cfg.lr_scale(e - 1));
        }
        // non-increasing through cosine
        for e in 41..60 {
            assert!(cfg.lr_scale(e) <= cfg.lr_scale(e - 1) + 1e-12);
        }
    }

    #[test]
    fn frozen_and_zero_lr_params_bitwise_unchanged() {
        let mut model = Model::<f32>::new(tiny_config()).unwrap();
        model.loc.encoder.set_frozen(&mut model.params, true);
        let before: Vec<(String, Vec<f32>)> = model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.data().to_vec()))
            .collect();

        // fake gradients everywhere
        for (_, p) in model.params.iter_mut() {
            p.grad = Tensor::full(p.value.shape(), 0.5);
        }
        let lrs = GroupLrs {
            experts: 1e-3,
            head: 0.0, // zero-lr group must stay untouched
            backbone: 1e-4,
            loc_proj: 1e-4,
        };
        let mut opt = AdamW::new(1e-8);
        opt.step(&mut model.params, &lrs, 1.0);

        for (_, p) in model.params.iter() {
            let orig = &before.iter().find(|(n, _)| *n == p.name).unwrap().1;
            let unchanged = p.value.data() == &orig[..];
            let is_frozen_enc = p.name.starts_with("locenc.");
            let is_head = p.group == ParamGroup::Head;
            if is_frozen_enc || is_head {
                assert!(unchanged, "{} must be bitwise unchanged", p.name);
            } else {
                assert!(!unchanged, "{} should have moved", p.name);
            }
        }
    }

    fn toy_samples(n: usize, classes: u32, seed: u64) -> Vec<TrainSample<f32>> {
        // linearly separable: class c gets a bright band at rows 2c..2c+2
        let mut rng = Rng::new(seed);
        (0..n)
            .map(|i| {
                let label = (i as u32) % classes;
                let mut img = vec![0.0f32; 16 * 16];
                for y in (label as usize * 4)..(label as usize * 4 + 4) {
                    for x in 0..16 {
                        img[y * 16 + x] = 1.0;
                    }
                }
                for v in img.iter_mut() {
                    *v += (rng.normal() * 0.05) as f32;
                }
                TrainSample {
                    id: i as u64,
                    image: Tensor::from_vec(vec![1, 16, 16], img).unwrap(),
                    label,
                    location: LatLng::new(
                        (label as f64) * 10.0 - 20.0,
                        (label as f64) * 20.0 - 40.0,
                    )
                    .unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn one_epoch_beats_chance_on_separable_data() {
        let mut cfg = tiny_config();
        cfg.num_classes = 2;
        let mut model = Model::<f32>::new(cfg).unwrap();
        let samples = toy_samples(64, 2, 3);
        let tcfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            warmup_epochs: 0,
            lrs: GroupLrs::dense_phase(),
            encoder_warm_epochs: 1,
            mixup_alpha: 0.0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &samples, &samples[..16], &tcfg).unwrap();
        assert!(!report.diverged);
        let eval = evaluate(&model, &samples, 16).unwrap();
        assert!(
            eval.accuracy > 50.0,
            "train accuracy {} should beat the 50% prior",
            eval.accuracy
        );
    }

    #[test]
    fn contrastive_weight_zero_reduces_to_ce() {
        let model = Model::<f32>::new(tiny_config()).unwrap();
        let samples = toy_samples(4, 2, 9);
        let refs: Vec<&TrainSample<f32>> = samples.iter().collect();
        let images = stack_images(&refs);
        let labels: Vec<u32> = samples.iter().map(|s| s.label).collect();
        let points: Vec<LatLng> = samples.iter().map(|s| s.location).collect();
        let targets = one_hot::<f32>(&labels, model.cfg.num_classes);

        let mut rng = Rng::new(0);
        let run = |weight: f64, rng: &mut Rng| {
            let cfg = TrainConfig {
                contrastive_weight: weight,
                ..TrainConfig::default()
            };
            let mut fp = model
                .forward(&images, &ForwardOpts::eval_hooked(), rng)
                .unwrap();
            let breakdown = total_loss(
                &model, &mut fp, &targets, &labels, &points, &cfg, false, rng,
            )
            .unwrap();
            (
                fp.graph.value(breakdown.total).item() as f64,
                breakdown.ce,
                breakdown.contrastive,
            )
        };
        let (total0, ce0, _) = run(0.0, &mut rng);
        assert_eq!(total0, ce0, "zero weight: total is exactly the CE term");
        let (total1, ce1, sup1) = run(0.01, &mut rng);
        assert!((total1 - (ce1 + 0.01 * sup1)).abs() < 1e-5);
        assert!(sup1 > 0.0);
    }

    #[test]
    fn divergence_aborts_and_restores() {
        let mut cfg = tiny_config();
        cfg.num_classes = 2;
        let mut model = Model::<f32>::new(cfg).unwrap();
        let samples = toy_samples(8, 2, 4);
        // absurd learning rate forces non-finite loss quickly
        let tcfg = TrainConfig {
            epochs: 30,
            batch_size: 4,
            warmup_epochs: 0,
            lrs: GroupLrs {
                experts: 1e9,
                head: 1e9,
                backbone: 1e9,
                loc_proj: 1e9,
            },
            encoder_warm_epochs: 0,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &samples, &samples, &tcfg).unwrap();
        assert!(report.diverged, "expected divergence under lr=1e9");
        // the model must still be usable (best checkpoint restored)
        let eval = evaluate(&model, &samples, 4).unwrap();
        assert!(eval.loss.is_finite());
    }

    #[test]
    fn csv_log_shape() {
        let report = TrainReport {
            log: vec![EpochLog {
                epoch: 0,
                split: "train".into(),
                loss: 1.5,
                acc: 50.0,
                lr: 0.8,
            }],
            best_val_acc: 50.0,
            best_epoch: 0,
            diverged: false,
        };
        let csv = report.to_csv();
        assert!(csv.starts_with("epoch,split,loss,acc,lr\n"));
        assert!(csv.contains("0,train,1.5"));
    }
}
