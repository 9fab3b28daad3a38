//! Multi-scale booster lesion detection at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: the dense NCHW [`tensor::FeatureMap`] with dilated convolution,
//!   poolings, gating arithmetic, their analytic backward passes, a
//!   finite-difference verifier and the binary snapshot format.
//! - [`fpn`]: a small bottom-up backbone, the top-down pathway and skip fusion.
//! - [`msb`]: weight-shared hierarchically dilated convolution followed by
//!   channel and spatial attention.
//! - [`detection`]: anchors, box coding, target assignment, losses and NMS.
//! - [`froc`]: detection matching, FROC curves and size-bucketed sensitivity.
//! - [`synth`]: deterministic 3-slice phantom generator and dataset IO.
//! - [`model`]: the assembled detector, its optimizer and training loop.
//!
//! All numeric code is generic over [`Scalar`]; the `*64` aliases are the
//! verification precision and the `*32` aliases the training precision.

pub mod checkpoint;
pub mod config;
pub mod detection;
pub mod experiment;
pub mod error;
pub mod fpn;
pub mod froc;
pub mod io;
pub mod model;
pub mod msb;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type FeatureMap32 = tensor::FeatureMap<f32>;
pub type FeatureMap64 = tensor::FeatureMap<f64>;
pub type Filter32 = tensor::Filter<f32>;
pub type Filter64 = tensor::Filter<f64>;
pub type MsbParams32 = msb::MsbParams<f32>;
pub type MsbParams64 = msb::MsbParams<f64>;
pub type Detector32 = model::Detector<f32>;
pub type Detector64 = model::Detector<f64>;
