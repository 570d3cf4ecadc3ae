//! Streaming monocular geometry stabilization at desk scale.
//!
//! Single-image geometry estimators drift in scale and shift when run over a
//! video stream. This crate implements the full study of that failure mode
//! and its fix — without any pretrained backbone, against a synthetic
//! streaming simulator:
//!
//! - [`tensor`]: dense f64 tensors, a reverse-mode gradient tape, and the
//!   NTF tensor container format.
//! - [`geometry`]: frame and sequence containers, manifests, SE(3) poses.
//! - [`alignment`]: affine scale-shift solvers and the metric / video /
//!   image evaluation protocols.
//! - [`modulation`]: feature-statistic modulation and the sweep study that
//!   maps statistics to output scale and shift.
//! - [`stabilizer`]: the recurrent feature-normalization module (ConvGRU and
//!   plain-GRU cells) with trainable statistic-prediction heads.
//! - [`losses`]: alignment, temporal, local-geometry, normal, and mask losses
//!   plus the weighted total objective.
//! - [`pose`]: Procrustes/SVD absolute orientation inside RANSAC, reference
//!   frame selection, stream fusion, and PLY export.
//! - [`simulator`]: parametric scenes, a drifting feature encoder, a
//!   synthetic decoder with exact statistic coupling, and correspondence
//!   generation with planted outliers.
//! - [`trainer`]: clip sampling, the Adam fine-tuning loop over stabilizer
//!   parameters, and end-to-end gradient checking.
//! - [`cli`]: the command implementations behind the `dyfn` binary.
//!
//! See the crate examples for runnable walkthroughs of each capability.

pub mod alignment;
pub mod cli;
pub mod geometry;
pub mod losses;
pub mod modulation;
pub mod pose;
pub mod simulator;
pub mod stabilizer;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use tensor::{Tensor, TensorError};
