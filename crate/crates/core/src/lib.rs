//! Diffusion fine-tuning with timestep-gated perceptual feedback.
//!
//! The crate covers the whole training and evaluation loop at toy scale:
//!
//! - [`diffusion`]: noise schedules, forward noising and the closed-form
//!   clean-sample estimate used to route detector feedback into the noise
//!   predictor.
//! - [`losses`]: boundary, identity, gaze, pose, interaction and alignment
//!   regularisation losses plus their gated combination.
//! - [`policy`]: timestep gates, the piecewise-uniform timestep sampler and
//!   inverse-average loss weighting.
//! - [`detectors`]: adapter traits for frozen detectors, differentiable toy
//!   implementations and a synthetic scene generator.
//! - [`data`]: manifest schema, preprocessing and annotation assembly.
//! - [`train`]: a small conditional denoiser, the optimisation step, phased
//!   runs with checkpoints and an ancestral sampler.
//! - [`evaluation`]: IoU-free interaction mAP, greedy identity similarity,
//!   gaze accuracy and alignment scores.
//! - [`profile`]: per-timestep loss curves.
//!
//! Gradients come from the reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod data;
pub mod detectors;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod policy;
pub mod profile;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, ErrorKind, Result};
pub use tensor::Tensor;
