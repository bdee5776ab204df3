//! Multi-scale sinusoidal location encoder and per-block projection heads.
//!
//! A point (longitude, latitude) in radians is expanded into sin/cos pairs
//! over a geometric ladder of scales, then mapped through a one-hidden-layer
//! FFN to a d-dimensional embedding. Each transformer block has a single
//! projector (layer norm -> linear -> ReLU -> dropout) shared by all of its
//! layers; the projected embedding is the location view paired with image
//! features in the contrastive loss.

use crate::geocell::LatLng;
use crate::tensor::nn::{self, LinearParams, NormParams};
use crate::tensor::{Binding, Graph, ParamGroup, ParamSet, Scalar, Tensor, TensorError, Var};
use crate::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, thiserror::Error)]
pub enum LocEncError {
    #[error("invalid encoder config: {0}")]
    BadConfig(String),
    #[error("unknown block index {0}")]
    UnknownBlock(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Settings for the sinusoidal grid encoder.
///
/// Defaults cover hemispheric down to ~half-degree variation.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridEncoderConfig {
    pub num_scales: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub ffn_hidden: usize,
    pub out_dim: usize,
}

impl Default for GridEncoderConfig {
    fn default() -> Self {
        Self {
            num_scales: 16,
            r_min: 0.01,
            r_max: std::f64::consts::PI,
            ffn_hidden: 128,
            out_dim: 256,
        }
    }
}

impl GridEncoderConfig {
    pub fn validate(&self) -> Result<(), LocEncError> {
        if self.num_scales < 2 {
            return Err(LocEncError::BadConfig(format!(
                "num_scales must be >= 2, got {}",
                self.num_scales
            )));
        }
        if !(self.r_min > 0.0 && self.r_min < self.r_max) {
            return Err(LocEncError::BadConfig(format!(
                "need 0 < r_min < r_max, got r_min={} r_max={}",
                self.r_min, self.r_max
            )));
        }
        if self.out_dim == 0 || self.ffn_hidden == 0 {
            return Err(LocEncError::BadConfig("dims must be >= 1".into()));
        }
        Ok(())
    }

    /// Geometric scale ladder: s_k = r_min * g^k with g = (r_max/r_min)^(1/(S-1)).
    pub fn scales(&self) -> Vec<f64> {
        let s = self.num_scales;
        let g = (self.r_max / self.r_min).powf(1.0 / (s as f64 - 1.0));
        (0..s).map(|k| self.r_min * g.powi(k as i32)).collect()
    }

    pub fn feature_dim(&self) -> usize {
        4 * self.num_scales
    }
}

/// Raw multi-scale features for one point: per scale k, the block
/// [sin(lng/s_k), cos(lng/s_k), sin(lat/s_k), cos(lat/s_k)], angles in
/// radians, concatenated in ladder order. All values lie in [-1, 1].
pub fn multiscale_features(p: &LatLng, cfg: &GridEncoderConfig) -> Vec<f64> {
    let (lng, lat) = p.radians();
    let mut out = Vec::with_capacity(cfg.feature_dim());
    for s in cfg.scales() {
        out.push((lng / s).sin());
        out.push((lng / s).cos());
        out.push((lat / s).sin());
        out.push((lat / s).cos());
    }
    out
}

/// FFN over multi-scale features: feature_dim -> hidden (ReLU) -> out_dim.
///
/// Weights are ordinary parameters in the `loc_proj` group; marking the
/// encoder frozen turns them into graph constants so no optimizer step can
/// touch them.
#[derive(Debug, Clone)]
pub struct LocationEncoder {
    pub cfg: GridEncoderConfig,
    l1: LinearParams,
    l2: LinearParams,
}

impl LocationEncoder {
    /// Assemble from already-registered parameters (model builder path).
    pub fn from_parts(cfg: GridEncoderConfig, l1: LinearParams, l2: LinearParams) -> Self {
        Self { cfg, l1, l2 }
    }

    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        cfg: GridEncoderConfig,
        rng: &mut Rng,
    ) -> Result<Self, LocEncError> {
        cfg.validate()?;
        let l1 = LinearParams::init(
            set,
            "locenc.ffn1",
            ParamGroup::LocProj,
            cfg.feature_dim(),
            cfg.ffn_hidden,
            rng,
        );
        let l2 = LinearParams::init(
            set,
            "locenc.ffn2",
            ParamGroup::LocProj,
            cfg.ffn_hidden,
            cfg.out_dim,
            rng,
        );
        Ok(Self { cfg, l1, l2 })
    }

    /// Mark the encoder FFN frozen (or not). Projectors are unaffected.
    pub fn set_frozen<S: Scalar>(&self, set: &mut ParamSet<S>, frozen: bool) {
        for lp in [self.l1, self.l2] {
            set.get_mut(lp.w).frozen = frozen;
            set.get_mut(lp.b).frozen = frozen;
        }
    }

    pub fn is_frozen<S: Scalar>(&self, set: &ParamSet<S>) -> bool {
        set.get(self.l1.w).frozen
    }

    /// Embed a batch of points: output `[N, out_dim]`.
    pub fn encode_batch<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &mut Binding,
        set: &ParamSet<S>,
        points: &[LatLng],
    ) -> Result<Var, TensorError> {
        let fd = self.cfg.feature_dim();
        let mut feats = Vec::with_capacity(points.len() * fd);
        for p in points {
            feats.extend(
                multiscale_features(p, &self.cfg)
                    .into_iter()
                    .map(S::from_f64),
            );
        }
        let x = g.constant(Tensor::from_vec(vec![points.len(), fd], feats)?);
        let h = nn::linear(g, bind, set, x, self.l1)?;
        let h = g.relu(h)?;
        nn::linear(g, bind, set, h, self.l2)
    }

    /// Eval-mode embedding of a single point.
    pub fn encode<S: Scalar>(
        &self,
        set: &ParamSet<S>,
        p: &LatLng,
    ) -> Result<Tensor<S>, TensorError> {
        let mut g = Graph::new();
        let mut bind = Binding::new();
        let v = self.encode_batch(&mut g, &mut bind, set, std::slice::from_ref(p))?;
        g.value(v).reshaped(vec![self.cfg.out_dim])
    }
}

pub const PROJECTOR_DROPOUT: f64 = 0.3;

/// Per-block projector: LayerNorm -> linear(d -> dim_b) -> ReLU -> dropout.
/// One projector exists per transformer block and is shared by all layers in
/// that block.
#[derive(Debug, Clone)]
pub struct BlockProjector {
    pub block_dim: usize,
    pub dropout: f64,
    norm: NormParams,
    proj: LinearParams,
}

impl BlockProjector {
    /// Assemble from already-registered parameters (model builder path).
    pub fn from_parts(
        block_dim: usize,
        dropout: f64,
        norm: NormParams,
        proj: LinearParams,
    ) -> Self {
        Self {
            block_dim,
            dropout,
            norm,
            proj,
        }
    }

    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        block_index: usize,
        in_dim: usize,
        block_dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let name = format!("locproj.block{block_index}");
        Self {
            block_dim,
            dropout: PROJECTOR_DROPOUT,
            norm: NormParams::init(set, &format!("{name}.norm"), ParamGroup::LocProj, in_dim),
            proj: LinearParams::init(
                set,
                &format!("{name}.proj"),
                ParamGroup::LocProj,
                in_dim,
                block_dim,
                rng,
            ),
        }
    }

    /// Project embeddings `[N, d]` to the block dimension `[N, dim_b]`.
    /// Dropout is applied only when `train` is set; eval is deterministic.
    pub fn project<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &mut Binding,
        set: &ParamSet<S>,
        embeddings: Var,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var, TensorError> {
        let x = nn::layer_norm(g, bind, set, embeddings, self.norm)?;
        let x = nn::linear(g, bind, set, x, self.proj)?;
        let x = g.relu(x)?;
        if train && self.dropout > 0.0 {
            let mask = nn::dropout_mask::<S>(g.shape(x), self.dropout, rng);
            let mask = g.constant(mask);
            return g.mul(x, mask);
        }
        Ok(x)
    }
}

/// Location head: one shared encoder plus one projector per block.
#[derive(Debug, Clone)]
pub struct LocationHead {
    pub encoder: LocationEncoder,
    pub projectors: Vec<BlockProjector>,
}

impl LocationHead {
    /// Assemble from already-registered parts (model builder path).
    pub fn from_parts(encoder: LocationEncoder, projectors: Vec<BlockProjector>) -> Self {
        Self {
            encoder,
            projectors,
        }
    }

    pub fn init<S: Scalar>(
        set: &mut ParamSet<S>,
        cfg: GridEncoderConfig,
        block_dims: &[usize],
        rng: &mut Rng,
    ) -> Result<Self, LocEncError> {
        let encoder = LocationEncoder::init(set, cfg.clone(), rng)?;
        let projectors = block_dims
            .iter()
            .enumerate()
            .map(|(b, &dim)| BlockProjector::init(set, b, cfg.out_dim, dim, rng))
            .collect();
        Ok(Self {
            encoder,
            projectors,
        })
    }

    /// Encode points then project to one block's dimension.
    #[allow(clippy::too_many_arguments)]
    pub fn project_to_block<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        bind: &mut Binding,
        set: &ParamSet<S>,
        points: &[LatLng],
        block: usize,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var, LocEncError> {
        let proj = self
            .projectors
            .get(block)
            .ok_or(LocEncError::UnknownBlock(block))?;
        let e = self.encoder.encode_batch(g, bind, set, points)?;
        Ok(proj.project(g, bind, set, e, train, rng)?)
    }
}
