//! Desk-scale laboratory for ground-truth-guided BEV detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode autodiff [`tensor::Graph`] and
//!   the AdamW optimiser.
//! * [`scene`]: synthetic ground-truth worlds, multi-view feature rendering
//!   and JSON I/O.
//! * [`model`]: BEV encoder, query decoder and prediction head, plus the
//!   `GTBV` checkpoint format.
//! * [`gtflow`]: training-only ground-truth flow (GT encoder, object
//!   crop-pool, contrastive GT-BEV alignment, GT query interaction).
//! * [`matching`]: Hungarian assignment and the set-prediction loss.
//! * [`metrics`]: center-distance AP, TP errors and NDS.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the two instantiations.

pub mod gtflow;
pub mod matching;
pub mod metrics;
pub mod model;
mod scalar;
pub mod scene;
pub mod tensor;

pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Detector64 = model::Detector<f64>;
pub type Detector32 = model::Detector<f32>;
pub type GtFlow64 = gtflow::GtFlowParams<f64>;
pub type GtFlow32 = gtflow::GtFlowParams<f32>;
