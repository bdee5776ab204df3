//! Geography-aware mixture-of-experts vision toolkit.
//!
//! The pipeline: train a tiny patch-transformer with a location-contrastive
//! auxiliary loss ([`model`]), convert its dense MLPs into routed expert
//! layers ([`moe`]), analyze patch routing per geographic cell and prune
//! experts for location-specific deployment ([`analysis`]). Geographic
//! grouping uses hierarchical cube-sphere cells ([`geocell`]); the numeric
//! substrate is a small reverse-mode tensor engine ([`tensor`]).

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod geocell;
pub mod locenc;
pub mod model;
pub mod moe;
pub mod plot;
pub mod rng;
pub mod tensor;

pub use rng::Rng;
pub use tensor::{Scalar, Tensor, TensorError};
