//! Crowd density estimation with coarse- and fine-grained attention.
//!
//! This crate implements the full pipeline for desk-scale crowd counting
//! experiments, with no external ML framework:
//!
//! - [`tensor`]: dense 4-D tensors and reverse-mode autodiff on a Wengert tape
//! - [`groundtruth`]: adaptive-kernel density maps and attention targets
//! - [`model`]: the encoder/decoder network with attention-gated regression
//! - [`losses`]: structural similarity, background, and attention losses
//! - [`train`]: augmentation, Adam, the training loop, and checkpoints
//! - [`metrics`]: counting and map-quality metrics plus the eval protocol
//! - [`synth`]: deterministic synthetic scene and dataset generation
//! - [`io`]: raster, image, manifest, and checkpoint file formats
//!
//! Everything is deterministic given a seed: same seed, same bytes.

pub mod experiments;
pub mod groundtruth;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
