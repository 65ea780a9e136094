//! Unsupervised intrinsic image decomposition trained on paired
//! image/LiDAR-intensity data.
//!
//! The model is a partially-shared multi-domain translation network over
//! four domains — image, LiDAR intensity, albedo and shade — trained
//! without ground-truth decompositions. LiDAR intensity is (approximately)
//! illumination-invariant, so an albedo-alignment loss between the albedo
//! translated from the image and the albedo translated from LiDAR pulls
//! shadows out of the reflectance layer. Inference needs only the image.
//!
//! Crate map:
//! - [`feature`]: value types (`[C,H,W]` maps, LiDAR maps) and pixel ops
//! - [`autodiff`]: tape-based reverse-mode differentiation
//! - [`nets`]: encoders, generators, discriminators, style mappers
//! - [`losses`]: all training objectives
//! - [`pipeline`]: translation paths, the forward bundle, inference
//! - [`trainer`]: two-phase adversarial optimization and checkpoints
//! - [`synthgen`]: procedural paired-scene generator and dataset I/O
//! - [`evalkit`]: WHDR and precision/recall/F1 against sparse judgments
//!
//! Every stage is generic over the scalar type: training runs in `f32`
//! (checkpoints store 32-bit tensors), verification suites run the same
//! code in `f64`.

pub mod autodiff;
pub mod error;
pub mod evalkit;
pub mod feature;
pub mod losses;
pub mod nets;
pub mod num;
pub mod pipeline;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use num::Scalar;

/// Default-precision (training) aliases.
pub type FeatureMap32 = feature::FeatureMap<f32>;
pub type LidarMap32 = feature::LidarMap<f32>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Model32 = nets::Model<f32>;

/// Double-precision aliases for verification work.
pub type FeatureMap64 = feature::FeatureMap<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model64 = nets::Model<f64>;
