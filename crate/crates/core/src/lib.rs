//! Contrastive representation learning on depth/reflectance image pairs.
//!
//! The crate provides, from the ground up:
//!
//! - a recorded computation tape with reverse-mode gradients ([`tape`]),
//!   verified against central differences ([`gradcheck`]);
//! - a small configurable convolutional encoder, MLP projection head and
//!   classifier head ([`model`]);
//! - the normalized temperature-scaled cross-entropy loss over paired
//!   views ([`contrastive`]);
//! - synchronized-crop view construction and channel composition
//!   ([`augment`]);
//! - a binary plane/manifest dataset format, a procedural conveyor-belt
//!   dataset generator, stratified folding and split protocols ([`data`]);
//! - pretraining, fine-tuning and linear-evaluation loops with Adam
//!   ([`pipeline`], [`optim`]);
//! - confusion-matrix metrics with cross-fold aggregation ([`metrics`]).
//!
//! All numeric code is generic over [`scalar::Scalar`]; runs default to
//! f64, with f32 selectable per run.

pub mod augment;
pub mod checkpoint;
pub mod contrastive;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod stream;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{NumericWidth, Scalar};

/// Concrete aliases for the two supported run widths.
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tape::Tape<f32>;
pub type Tape64 = tape::Tape<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type ModelParams64 = model::ModelParams<f64>;
