//! Cross-domain object detection with two adversarial feature-alignment
//! mechanisms (Gram-matrix style alignment and spatial-attention alignment),
//! built on a small reverse-mode autodiff engine, plus a synthetic
//! clean/foggy dataset, a toy grid detector, mAP evaluation and the training,
//! ablation and sweep harness.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod align;
pub mod data;
pub mod detect;
pub mod harness;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Model32 = harness::Model<f32>;
pub type Model64 = harness::Model<f64>;
