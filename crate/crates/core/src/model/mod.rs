//! Tiny patch-transformer classifier with pre-MLP activation hooks and a
//! location-contrastive auxiliary loss.
//!
//! The layout follows the mobile-ViT family loosely: groups ("blocks") of
//! transformer layers at decreasing spatial resolution. Conv stages are
//! replaced by a strided-patch embedding and 2x2 patch merges between
//! blocks; all expert/geo machinery lives in the transformer MLPs. Each
//! layer computes `F = Norm(MHSA(x) + x)` (the pre-MLP activation) and then
//! `y = F + MLP(F)`, so a converted layer's residual structure supports
//! exact zeroing under expert ablation.

mod loss;
mod train;

pub use loss::{mix_batch, one_hot, supcon_loss, MixedBatch, SupconOutput};
pub use train::{
    evaluate, total_loss, train, AdamW, EpochLog, EvalResult, GroupLrs, LocBlocks, LossBreakdown,
    TrainConfig, TrainError, TrainReport, TrainSample,
};

use crate::locenc::{GridEncoderConfig, LocationHead};
use crate::moe::{self, MoeLayer, MoeSettings};
use crate::tensor::nn::{self, LinearParams, MhsaParams, NormParams};
use crate::tensor::{Binding, Graph, ParamGroup, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {got:?}, expected {want:?}")]
    WrongShape {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Moe(#[from] moe::MoeError),
    #[error(transparent)]
    LocEnc(#[from] crate::locenc::LocEncError),
}

/// One group of transformer layers at a fixed width/resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
}

/// Full structural description of the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub blocks: Vec<BlockSpec>,
    pub num_classes: usize,
    /// Classifier head: pooled dim -> expand -> bottleneck -> classes.
    pub classifier_expand: usize,
    pub classifier_bottleneck: usize,
    /// Dense MLP hidden width as a multiple of the layer dim.
    pub mlp_ratio: f64,
    /// Global layer indices eligible for expert conversion.
    pub expert_layers: Vec<usize>,
    /// Present once the model has been converted to a mixture of experts.
    pub moe: Option<MoeSettings>,
    pub loc_encoder: GridEncoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            blocks: vec![
                BlockSpec {
                    layers: 2,
                    dim: 32,
                    heads: 2,
                },
                BlockSpec {
                    layers: 4,
                    dim: 48,
                    heads: 2,
                },
                BlockSpec {
                    layers: 3,
                    dim: 64,
                    heads: 2,
                },
            ],
            num_classes: 8,
            classifier_expand: 128,
            classifier_bottleneck: 64,
            mlp_ratio: 2.0,
            expert_layers: vec![1, 3, 5, 7],
            moe: None,
            loc_encoder: GridEncoderConfig {
                num_scales: 8,
                ffn_hidden: 32,
                out_dim: 32,
                ..GridEncoderConfig::default()
            },
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn num_layers(&self) -> usize {
        self.blocks.iter().map(|b| b.layers).sum()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.dim).collect()
    }

    /// Block index of a global layer index.
    pub fn block_of_layer(&self, layer: usize) -> Option<usize> {
        let mut seen = 0;
        for (b, spec) in self.blocks.iter().enumerate() {
            if layer < seen + spec.layers {
                return Some(b);
            }
            seen += spec.layers;
        }
        None
    }

    /// Patch-grid side length within a block.
    pub fn grid_at_block(&self, block: usize) -> usize {
        (self.image_size / self.patch_size) >> block
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.blocks.is_empty() {
            return fail("at least one block required".into());
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.num_classes < 2 {
            return fail("need >= 1 channel and >= 2 classes".into());
        }
        let g0 = self.image_size / self.patch_size;
        if g0 >> (self.blocks.len() - 1) == 0 || !g0.is_multiple_of(1 << (self.blocks.len() - 1)) {
            return fail(format!(
                "patch grid {g0} cannot halve across {} blocks",
                self.blocks.len()
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.layers == 0 || b.dim == 0 {
                return fail(format!("block {i} must have layers and dim"));
            }
            if b.heads == 0 || b.dim % b.heads != 0 {
                return fail(format!(
                    "block {i}: dim {} not divisible by heads {}",
                    b.dim, b.heads
                ));
            }
        }
        if !(self.mlp_ratio > 0.0) {
            return fail("mlp_ratio must be positive".into());
        }
        let n = self.num_layers();
        if let Some(&bad) = self.expert_layers.iter().find(|&&l| l >= n) {
            return fail(format!("expert layer {bad} out of range 0..{n}"));
        }
        if let Some(m) = &self.moe {
            if m.experts < 2 {
                return fail("moe.experts must be >= 2".into());
            }
            if m.hidden == 0 || m.rank == 0 {
                return fail("moe.hidden and moe.rank must be >= 1".into());
            }
        }
        self.loc_encoder.validate()?;
        Ok(())
    }

    fn dense_mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Dense transformer MLP (two-layer, ReLU).
#[derive(Debug, Clone, Copy)]
pub struct DenseMlp {
    pub l1: LinearParams,
    pub l2: LinearParams,
}

/// The MLP slot of a layer: dense until conversion, routed after.
#[derive(Debug, Clone)]
pub enum MlpKind<S: Scalar> {
    Dense(DenseMlp),
    Moe(MoeLayer<S>),
}

#[derive(Debug, Clone)]
pub struct TransformerLayer<S: Scalar> {
    pub attn: MhsaParams,
    /// The single pre-MLP norm: F = LN(x + MHSA(x)).
    pub norm: NormParams,
    pub mlp: MlpKind<S>,
    pub dim: usize,
    pub block: usize,
    /// Patch-grid side length at this layer.
    pub grid: usize,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub expand: LinearParams,
    pub bottleneck: LinearParams,
    pub out: LinearParams,
}

/// The full model: parameters plus the wiring that interprets them.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<S>,
    pub patch_embed: LinearParams,
    pub pos_embed: crate::tensor::ParamId,
    /// Patch-merge projections between consecutive blocks.
    pub merges: Vec<LinearParams>,
    pub layers: Vec<TransformerLayer<S>>,
    pub head: ClassifierHead,
    pub loc: LocationHead,
}

/// Where the builder gets tensors from.
enum Source<'a, S: Scalar> {
    Fresh(&'a mut Rng),
    Saved(&'a mut BTreeMap<String, Tensor<S>>),
}

impl<S: Scalar> Source<'_, S> {
    fn take(
        &mut self,
        name: &str,
        shape: &[usize],
        fresh: impl FnOnce(&mut Rng) -> Tensor<S>,
    ) -> Result<Tensor<S>, ModelError> {
        match self {
            Source::Fresh(rng) => Ok(fresh(rng)),
            Source::Saved(map) => {
                let t = map
                    .remove(name)
                    .ok_or_else(|| ModelError::MissingTensor(name.to_string()))?;
                if t.shape() != shape {
                    return Err(ModelError::WrongShape {
                        name: name.to_string(),
                        got: t.shape().to_vec(),
                        want: shape.to_vec(),
                    });
                }
                Ok(t)
            }
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Fresh, seeded model.
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        let mut rng = Rng::new(cfg.seed).derive(0x6d6f64656c);
        Self::build(cfg, &mut Source::Fresh(&mut rng))
    }

    /// Rebuild a model from named tensors (checkpoint load). Leftover or
    /// missing tensors are errors.
    pub fn from_tensors(
        cfg: ModelConfig,
        mut tensors: BTreeMap<String, Tensor<S>>,
    ) -> Result<Self, ModelError> {
        let model = Self::build(cfg, &mut Source::Saved(&mut tensors))?;
        if let Some(name) = tensors.keys().next() {
            return Err(ModelError::BadConfig(format!(
                "checkpoint holds unknown tensor {name:?}"
            )));
        }
        Ok(model)
    }

    fn build(cfg: ModelConfig, src: &mut Source<S>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut set = ParamSet::new();
        let g0 = cfg.image_size / cfg.patch_size;
        let p0 = g0 * g0;
        let in_dim = cfg.channels * cfg.patch_size * cfg.patch_size;
        let d0 = cfg.blocks[0].dim;

        let add_linear = |set: &mut ParamSet<S>,
                          src: &mut Source<S>,
                          name: &str,
                          group: ParamGroup,
                          d_in: usize,
                          d_out: usize|
         -> Result<LinearParams, ModelError> {
            let scale = 1.0 / (d_in as f64).sqrt();
            let w = src.take(&format!("{name}.w"), &[d_in, d_out], |rng| {
                Tensor::randn(&[d_in, d_out], scale, rng)
            })?;
            let b = src.take(&format!("{name}.b"), &[d_out], |_| Tensor::zeros(&[d_out]))?;
            Ok(LinearParams {
                w: set.add(format!("{name}.w"), group, w),
                b: set.add(format!("{name}.b"), group, b),
            })
        };

        let patch_embed = add_linear(
            &mut set,
            src,
            "patch_embed",
            ParamGroup::Backbone,
            in_dim,
            d0,
        )?;
        let pos = src.take("pos_embed", &[p0, d0], |rng| {
            Tensor::randn(&[p0, d0], 0.02, rng)
        })?;
        let pos_embed = set.add("pos_embed", ParamGroup::Backbone, pos);

        let mut layers = Vec::with_capacity(cfg.num_layers());
        let mut merges = Vec::new();
        let mut global = 0usize;
        for (b, spec) in cfg.blocks.iter().enumerate() {
            if b > 0 {
                let prev = cfg.blocks[b - 1].dim;
                merges.push(add_linear(
                    &mut set,
                    src,
                    &format!("merge{b}"),
                    ParamGroup::Backbone,
                    4 * prev,
                    spec.dim,
                )?);
            }
            let grid = cfg.grid_at_block(b);
            for _ in 0..spec.layers {
                let lname = format!("layer{global}");
                let attn = {
                    let wq = add_linear(
                        &mut set,
                        src,
                        &format!("{lname}.attn.wq"),
                        ParamGroup::Backbone,
                        spec.dim,
                        spec.dim,
                    )?;
                    let wk = add_linear(
                        &mut set,
                        src,
                        &format!("{lname}.attn.wk"),
                        ParamGroup::Backbone,
                        spec.dim,
                        spec.dim,
                    )?;
                    let wv = add_linear(
                        &mut set,
                        src,
                        &format!("{lname}.attn.wv"),
                        ParamGroup::Backbone,
                        spec.dim,
                        spec.dim,
                    )?;
                    let wo = add_linear(
                        &mut set,
                        src,
                        &format!("{lname}.attn.wo"),
                        ParamGroup::Backbone,
                        spec.dim,
                        spec.dim,
                    )?;
                    MhsaParams {
                        wq,
                        wk,
                        wv,
                        wo,
                        heads: spec.heads,
                    }
                };
                let gamma = src.take(&format!("{lname}.norm.gamma"), &[spec.dim], |_| {
                    Tensor::full(&[spec.dim], S::one())
                })?;
                let beta = src.take(&format!("{lname}.norm.beta"), &[spec.dim], |_| {
                    Tensor::zeros(&[spec.dim])
                })?;
                let norm = NormParams {
                    gamma: set.add(format!("{lname}.norm.gamma"), ParamGroup::Backbone, gamma),
                    beta: set.add(format!("{lname}.norm.beta"), ParamGroup::Backbone, beta),
                };

                let is_moe = cfg.moe.is_some() && cfg.expert_layers.contains(&global);
                let mlp = if is_moe {
                    let ms = cfg.moe.clone().expect("checked");
                    let (e, d) = (ms.experts, spec.dim);
                    let cent =
                        src.take(&format!("{lname}.moe.gate.centroids"), &[e, d], |rng| {
                            let mut t = Tensor::randn(&[e, d], 1.0, rng);
                            t = normalize_rows(&t);
                            t
                        })?;
                    let rank = ms.rank.min(e.min(d));
                    let factors = if rank < e.min(d) {
                        let u = src.take(&format!("{lname}.moe.gate.u"), &[e, rank], |rng| {
                            Tensor::randn(&[e, rank], 0.1, rng)
                        })?;
                        let v = src.take(&format!("{lname}.moe.gate.v"), &[rank, d], |rng| {
                            Tensor::randn(&[rank, d], 0.1, rng)
                        })?;
                        Some((u, v))
                    } else {
                        None
                    };
                    let mut experts = Vec::with_capacity(e);
                    for k in 0..e {
                        let ename = format!("{lname}.moe.expert{k}");
                        let l1 = add_linear(
                            &mut set,
                            src,
                            &format!("{ename}.l1"),
                            ParamGroup::Experts,
                            d,
                            ms.hidden,
                        )?;
                        let l2 = add_linear(
                            &mut set,
                            src,
                            &format!("{ename}.l2"),
                            ParamGroup::Experts,
                            ms.hidden,
                            d,
                        )?;
                        experts.push(moe::ExpertMlp { l1, l2 });
                    }
                    MlpKind::Moe(MoeLayer {
                        gate: moe::ExpertGate {
                            centroids: cent,
                            factors,
                            temperature: ms.temperature,
                        },
                        experts,
                        hidden: ms.hidden,
                        ablated: Default::default(),
                    })
                } else {
                    let hidden = cfg.dense_mlp_hidden(spec.dim);
                    MlpKind::Dense(DenseMlp {
                        l1: add_linear(
                            &mut set,
                            src,
                            &format!("{lname}.mlp.l1"),
                            ParamGroup::Backbone,
                            spec.dim,
                            hidden,
                        )?,
                        l2: add_linear(
                            &mut set,
                            src,
                            &format!("{lname}.mlp.l2"),
                            ParamGroup::Backbone,
                            hidden,
                            spec.dim,
                        )?,
                    })
                };
                layers.push(TransformerLayer {
                    attn,
                    norm,
                    mlp,
                    dim: spec.dim,
                    block: b,
                    grid,
                });
                global += 1;
            }
        }

        let d_last = cfg.blocks.last().expect("non-empty").dim;
        let head = ClassifierHead {
            expand: add_linear(
                &mut set,
                src,
                "head.expand",
                ParamGroup::Head,
                d_last,
                cfg.classifier_expand,
            )?,
            bottleneck: add_linear(
                &mut set,
                src,
                "head.bottleneck",
                ParamGroup::Head,
                cfg.classifier_expand,
                cfg.classifier_bottleneck,
            )?,
            out: add_linear(
                &mut set,
                src,
                "head.out",
                ParamGroup::Head,
                cfg.classifier_bottleneck,
                cfg.num_classes,
            )?,
        };

        // location head: encoder FFN + one projector per block
        let loc = {
            let enc_cfg = cfg.loc_encoder.clone();
            let fd = enc_cfg.feature_dim();
            let f1 = add_linear(
                &mut set,
                src,
                "locenc.ffn1",
                ParamGroup::LocProj,
                fd,
                enc_cfg.ffn_hidden,
            )?;
            let f2 = add_linear(
                &mut set,
                src,
                "locenc.ffn2",
                ParamGroup::LocProj,
                enc_cfg.ffn_hidden,
                enc_cfg.out_dim,
            )?;
            let mut projectors = Vec::new();
            for (b, spec) in cfg.blocks.iter().enumerate() {
                let pname = format!("locproj.block{b}");
                let gamma = src.take(&format!("{pname}.norm.gamma"), &[enc_cfg.out_dim], |_| {
                    Tensor::full(&[enc_cfg.out_dim], S::one())
                })?;
                let beta = src.take(&format!("{pname}.norm.beta"), &[enc_cfg.out_dim], |_| {
                    Tensor::zeros(&[enc_cfg.out_dim])
                })?;
                let norm = NormParams {
                    gamma: set.add(format!("{pname}.norm.gamma"), ParamGroup::LocProj, gamma),
                    beta: set.add(format!("{pname}.norm.beta"), ParamGroup::LocProj, beta),
                };
                let proj = add_linear(
                    &mut set,
                    src,
                    &format!("{pname}.proj"),
                    ParamGroup::LocProj,
                    enc_cfg.out_dim,
                    spec.dim,
                )?;
                projectors.push(crate::locenc::BlockProjector::from_parts(
                    spec.dim,
                    crate::locenc::PROJECTOR_DROPOUT,
                    norm,
                    proj,
                ));
            }
            LocationHead::from_parts(
                crate::locenc::LocationEncoder::from_parts(enc_cfg, f1, f2),
                projectors,
            )
        };

        Ok(Model {
            cfg,
            params: set,
            patch_embed,
            pos_embed,
            merges,
            layers,
            head,
            loc,
        })
    }

    /// All tensors of the model by name: parameters plus gate matrices.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor<S>> {
        let mut out = BTreeMap::new();
        for (_, p) in self.params.iter() {
            out.insert(p.name.clone(), p.value.clone());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let MlpKind::Moe(m) = &layer.mlp {
                let lname = format!("layer{i}");
                out.insert(
                    format!("{lname}.moe.gate.centroids"),
                    m.gate.centroids.clone(),
                );
                if let Some((u, v)) = &m.gate.factors {
                    out.insert(format!("{lname}.moe.gate.u"), u.clone());
                    out.insert(format!("{lname}.moe.gate.v"), v.clone());
                }
            }
        }
        out
    }

    /// Total stored f32/f64 entries (parameters + gate matrices).
    pub fn num_entries(&self) -> usize {
        self.named_tensors().values().map(|t| t.numel()).sum()
    }

    /// Global indices of converted layers, in order.
    pub fn moe_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.mlp, MlpKind::Moe(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn moe_layer(&self, layer: usize) -> Option<&MoeLayer<S>> {
        match &self.layers.get(layer)?.mlp {
            MlpKind::Moe(m) => Some(m),
            MlpKind::Dense(_) => None,
        }
    }

    pub fn moe_layer_mut(&mut self, layer: usize) -> Option<&mut MoeLayer<S>> {
        match &mut self.layers.get_mut(layer)?.mlp {
            MlpKind::Moe(m) => Some(m),
            MlpKind::Dense(_) => None,
        }
    }

    /// Set the ablated expert set for one layer.
    pub fn set_ablated(&mut self, layer: usize, experts: &[usize]) -> Result<(), ModelError> {
        let e = self
            .moe_layer(layer)
            .ok_or_else(|| ModelError::BadConfig(format!("layer {layer} is not a MoE layer")))?
            .num_experts();
        if let Some(&bad) = experts.iter().find(|&&x| x >= e) {
            return Err(ModelError::BadConfig(format!(
                "expert {bad} out of range 0..{e}"
            )));
        }
        let m = self.moe_layer_mut(layer).expect("checked above");
        m.ablated = experts.iter().copied().collect();
        Ok(())
    }

    pub fn clear_ablations(&mut self) {
        for layer in &mut self.layers {
            if let MlpKind::Moe(m) = &mut layer.mlp {
                m.ablated.clear();
            }
        }
    }

    /// Forward pass over an image batch `[B, C, H, W]`.
    pub fn forward(
        &self,
        images: &Tensor<S>,
        opts: &ForwardOpts,
        rng: &mut Rng,
    ) -> Result<ForwardPass<S>, ModelError> {
        let shape = images.shape().to_vec();
        let want = [
            0,
            self.cfg.channels,
            self.cfg.image_size,
            self.cfg.image_size,
        ];
        if shape.len() != 4 || shape[1..] != want[1..] {
            return Err(ModelError::BadConfig(format!(
                "image batch shape {shape:?} does not match configured {:?}",
                &want[1..]
            )));
        }
        let bsz = shape[0];
        let mut g = Graph::new();
        let mut bind = Binding::new();

        // strided patch embedding
        let patches = g.constant(im2col(images, self.cfg.patch_size)?);
        let x = nn::linear(&mut g, &mut bind, &self.params, patches, self.patch_embed)?;
        let g0 = self.cfg.image_size / self.cfg.patch_size;
        let d0 = self.cfg.blocks[0].dim;
        let x = g.reshape(x, vec![bsz, g0 * g0, d0])?;
        let pos = bind.bind(&mut g, &self.params, self.pos_embed);
        let mut x = g.add_bias(x, pos)?;

        let mut pre_mlp = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut routes = BTreeMap::new();
        let mut cur_block = 0usize;
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.block != cur_block {
                // 2x2 patch merge into the next block's width
                let grid = self.cfg.grid_at_block(cur_block);
                let merged = g.space_to_depth(x, grid, grid)?;
                let pn = g.shape(merged)[1];
                let md = g.shape(merged)[2];
                let flat = g.reshape(merged, vec![bsz * pn, md])?;
                let proj = nn::linear(
                    &mut g,
                    &mut bind,
                    &self.params,
                    flat,
                    self.merges[layer.block - 1],
                )?;
                x = g.reshape(proj, vec![bsz, pn, layer.dim])?;
                cur_block = layer.block;
            }
            let attn = nn::mhsa(&mut g, &mut bind, &self.params, x, &layer.attn)?;
            let res = g.add(attn, x)?;
            let f = nn::layer_norm(&mut g, &mut bind, &self.params, res, layer.norm)?;
            if opts.hooks {
                pre_mlp.push(Some(f));
            } else {
                pre_mlp.push(None);
            }

            let pn = g.shape(f)[1];
            let flat = g.reshape(f, vec![bsz * pn, layer.dim])?;
            let y = match &layer.mlp {
                MlpKind::Dense(mlp) => {
                    let h = nn::linear(&mut g, &mut bind, &self.params, flat, mlp.l1)?;
                    let h = g.relu(h)?;
                    let out = nn::linear(&mut g, &mut bind, &self.params, h, mlp.l2)?;
                    g.add(flat, out)?
                }
                MlpKind::Moe(m) => {
                    let (out, route) =
                        moe::apply_moe_layer(&mut g, &mut bind, &self.params, m, flat)?;
                    if opts.trace {
                        routes.insert(i, route);
                    }
                    out
                }
            };
            x = g.reshape(y, vec![bsz, pn, layer.dim])?;
            layer_outputs.push(x);
        }

        // pooled feature -> classifier head
        let pooled = g.mean_axis(x, 1)?;
        let h = nn::linear(&mut g, &mut bind, &self.params, pooled, self.head.expand)?;
        let mut h = g.relu(h)?;
        if opts.train && opts.classifier_dropout > 0.0 {
            let mask = nn::dropout_mask::<S>(g.shape(h), opts.classifier_dropout, rng);
            let mask = g.constant(mask);
            h = g.mul(h, mask)?;
        }
        let h = nn::linear(&mut g, &mut bind, &self.params, h, self.head.bottleneck)?;
        let h = g.relu(h)?;
        let logits = nn::linear(&mut g, &mut bind, &self.params, h, self.head.out)?;

        Ok(ForwardPass {
            graph: g,
            binding: bind,
            logits,
            pooled,
            pre_mlp,
            layer_outputs,
            routes,
            batch: bsz,
        })
    }
}

fn normalize_rows<S: Scalar>(t: &Tensor<S>) -> Tensor<S> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = t.data().to_vec();
    for i in 0..r {
        let row = &mut out[i * c..(i + 1) * c];
        let n = row
            .iter()
            .map(|&v| v.to_f64_() * v.to_f64_())
            .sum::<f64>()
            .sqrt()
            .max(1e-30);
        for v in row.iter_mut() {
            *v = S::from_f64(v.to_f64_() / n);
        }
    }
    Tensor::from_vec(vec![r, c], out).expect("normalize keeps shape")
}

/// Extract non-overlapping patches: `[B, C, H, W]` -> `[B*P, C*ps*ps]`.
/// Within a patch the order is channel-major, then rows, then columns.
fn im2col<S: Scalar>(images: &Tensor<S>, ps: usize) -> Result<Tensor<S>, TensorError> {
    let shape = images.shape();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (gh, gw) = (h / ps, w / ps);
    let data = images.data();
    let mut out = Vec::with_capacity(b * gh * gw * c * ps * ps);
    for bi in 0..b {
        for pr in 0..gh {
            for pc in 0..gw {
                for ch in 0..c {
                    for dy in 0..ps {
                        for dx in 0..ps {
                            let y = pr * ps + dy;
                            let x = pc * ps + dx;
                            out.push(data[((bi * c + ch) * h + y) * w + x]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b * gh * gw, c * ps * ps], out)
}

/// Forward options. `hooks` captures pre-MLP activations; `trace` records
/// per-patch expert routes at MoE layers.
#[derive(Debug, Clone)]
pub struct ForwardOpts {
    pub train: bool,
    pub hooks: bool,
    pub trace: bool,
    pub classifier_dropout: f64,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        Self {
            train: false,
            hooks: false,
            trace: false,
            classifier_dropout: 0.0,
        }
    }
}

impl ForwardOpts {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn eval_hooked() -> Self {
        Self {
            hooks: true,
            ..Self::default()
        }
    }

    pub fn traced() -> Self {
        Self {
            trace: true,
            ..Self::default()
        }
    }
}

/// Everything one forward pass produced. Vars stay valid as long as the
/// contained graph is alive.
pub struct ForwardPass<S: Scalar> {
    pub graph: Graph<S>,
    pub binding: Binding,
    pub logits: Var,
    pub pooled: Var,
    /// Pre-MLP activation per layer (`Some` only when hooks were on).
    pub pre_mlp: Vec<Option<Var>>,
    /// Output of every transformer layer `[B, P, D]`.
    pub layer_outputs: Vec<Var>,
    /// layer index -> expert per flattened row (row = b * P + p).
    pub routes: BTreeMap<usize, Vec<usize>>,
    pub batch: usize,
}

impl<S: Scalar> ForwardPass<S> {
    pub fn logits_tensor(&self) -> &Tensor<S> {
        self.graph.value(self.logits)
    }

    /// Captured pre-MLP activation of a layer.
    pub fn pre_mlp_tensor(&self, layer: usize) -> Option<&Tensor<S>> {
        self.pre_mlp
            .get(layer)
            .and_then(|v| v.map(|var| self.graph.value(var)))
    }

    /// Top-1 predicted class per sample.
    pub fn predictions(&self) -> Vec<u32> {
        let t = self.logits_tensor();
        let k = t.shape()[1];
        t.data()
            .chunks(k)
            .map(|row| {
                let mut best = 0usize;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            blocks: vec![
                BlockSpec {
                    layers: 2,
                    dim: 16,
                    heads: 2,
                },
                BlockSpec {
                    layers: 2,
                    dim: 24,
                    heads: 2,
                },
            ],
            num_classes: 4,
            classifier_expand: 32,
            classifier_bottleneck: 16,
            expert_layers: vec![1, 3],
            loc_encoder: GridEncoderConfig {
                num_scales: 4,
                ffn_hidden: 8,
                out_dim: 8,
                ..GridEncoderConfig::default()
            },
            seed: 7,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let model = Model::<f32>::new(tiny_config()).unwrap();
        let images = Tensor::zeros(&[1, 1, 16, 16]);
        let mut rng = Rng::new(0);
        let fp = model
            .forward(&images, &ForwardOpts::eval(), &mut rng)
            .unwrap();
        assert_eq!(fp.logits_tensor().shape(), &[1, 4]);
        assert!(fp.logits_tensor().all_finite());
        let fp2 = model
            .forward(&images, &ForwardOpts::eval(), &mut rng)
            .unwrap();
        assert_eq!(fp.logits_tensor().data(), fp2.logits_tensor().data());
    }

    #[test]
    fn batch_permutation_permutes_logits() {
        let model = Model::<f32>::new(tiny_config()).unwrap();
        let mut rng = Rng::new(5);
        let a = Tensor::<f32>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let mut ab = a.data().to_vec();
        ab.extend_from_slice(b.data());
        let mut ba = b.data().to_vec();
        ba.extend_from_slice(a.data());
        let ab = Tensor::from_vec(vec![2, 1, 16, 16], ab).unwrap();
        let ba = Tensor::from_vec(vec![2, 1, 16, 16], ba).unwrap();
        let la = model.forward(&ab, &ForwardOpts::eval(), &mut rng).unwrap();
        let lb = model.forward(&ba, &ForwardOpts::eval(), &mut rng).unwrap();
        let (la, lb) = (la.logits_tensor(), lb.logits_tensor());
        assert_eq!(&la.data()[0..4], &lb.data()[4..8]);
        assert_eq!(&la.data()[4..8], &lb.data()[0..4]);
    }

    #[test]
    fn hooks_capture_every_layer() {
        let model = Model::<f32>::new(tiny_config()).unwrap();
        let images = Tensor::zeros(&[2, 1, 16, 16]);
        let mut rng = Rng::new(0);
        let fp = model
            .forward(&images, &ForwardOpts::eval_hooked(), &mut rng)
            .unwrap();
        assert_eq!(fp.pre_mlp.len(), 4);
        for l in 0..4 {
            let t = fp.pre_mlp_tensor(l).expect("hook captured");
            let want_grid = if l < 2 { 16 } else { 4 };
            let want_dim = if l < 2 { 16 } else { 24 };
            assert_eq!(t.shape(), &[2, want_grid, want_dim]);
        }
        // hooks off -> no activations
        let fp = model
            .forward(&images, &ForwardOpts::eval(), &mut rng)
            .unwrap();
        assert!(fp.pre_mlp_tensor(0).is_none());
    }

    #[test]
    fn wrong_image_shape_is_config_error() {
        let model = Model::<f32>::new(tiny_config()).unwrap();
        let images = Tensor::zeros(&[1, 1, 8, 8]);
        let mut rng = Rng::new(0);
        assert!(model
            .forward(&images, &ForwardOpts::eval(), &mut rng)
            .is_err());
    }

    #[test]
    fn checkpoint_tensor_round_trip_through_builder() {
        let model = Model::<f32>::new(tiny_config()).unwrap();
        let tensors = model.named_tensors();
        let rebuilt = Model::from_tensors(model.cfg.clone(), tensors).unwrap();
        let mut rng = Rng::new(1);
        let images = Tensor::<f32>::randn(&[1, 1, 16, 16], 1.0, &mut rng);
        let a = model
            .forward(&images, &ForwardOpts::eval(), &mut rng)
            .unwrap();
        let b = rebuilt
            .forward(&images, &ForwardOpts::eval(), &mut rng)
            .unwrap();
        assert_eq!(a.logits_tensor().data(), b.logits_tensor().data());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = tiny_config();
        c.blocks[0].heads = 3; // 16 % 3 != 0
        assert!(Model::<f32>::new(c).is_err());
        let mut c = tiny_config();
        c.expert_layers = vec![99];
        assert!(Model::<f32>::new(c).is_err());
        let mut c = tiny_config();
        c.patch_size = 5;
        assert!(Model::<f32>::new(c).is_err());
    }
}
