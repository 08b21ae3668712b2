//! Core engine for transformation-consistent meta-hallucination training.
//!
//! The crate provides, from the ground up:
//!
//! - [`tensor`]: a minimal reverse-mode automatic differentiation tape over
//!   dense tensors, including differentiable bilinear grid sampling and a
//!   finite-difference gradient checker,
//! - [`nets`]: a small 2D U-Net segmenter and a spatial-transformer
//!   hallucinator with warping utilities,
//! - [`losses`]: segmentation / transformation / consistency objectives and
//!   the ramp-up and warmup schedules,
//! - [`ema`]: the exponential-moving-average teacher,
//! - [`meta`]: the episodic meta-learning trainer,
//! - [`synth`]: a procedural two-domain segmentation benchmark,
//! - [`metrics`]: Dice / average surface distance evaluation with
//!   connected-component post-processing,
//! - [`checkpoint`] and [`dataset`]: the on-disk binary formats.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod ema;
pub mod error;
pub mod losses;
pub mod meta;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
