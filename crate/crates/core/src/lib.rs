//! Multimodal CT/PET slice fusion and ensembled classification.
//!
//! The pipeline generates (or ingests) co-registered CT/PET slice pairs,
//! fuses them into single-channel images via PCA reconstruction followed by
//! a convolutional autoencoder, augments the training split, trains a
//! majority-voting ensemble of small CNN classifiers, and reports confusion
//! metrics plus Grad-CAM attention maps. A config-driven runner wires the
//! stages together and drives the ablation grids.

pub mod augment;
pub mod container;
pub mod ensemble;
pub mod error;
pub mod fusion;
pub mod ingest;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod runner;
pub mod xai;

pub use error::{Error, Result};

/// Single-channel image grid, indexed `[row, col]`.
pub type Grid = ndarray::Array2<f32>;
