//! Diabetic-retinopathy grading pipeline on a self-contained tensor core.
//!
//! The crate is organized around the stages of the pipeline:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation
//!   and a finite-difference gradient oracle
//! - [`image`]: fundus decoding (PPM/PNG), circular crop, resize, CLAHE,
//!   gamma correction, stochastic augmentation, and mixup
//! - [`dataset`]: CSV index loading, stratified splitting, class merging,
//!   replication oversampling, and a synthetic fundus generator
//! - [`model`]: convolutional backbone with squeeze-excitation, channel and
//!   spatial attention, and a Gaussian fuzzy classification head
//! - [`train`]: focal loss with label smoothing, AdamW, plateau LR
//!   scheduling, and the epoch loop
//! - [`eval`]: confusion matrix, classification report, one-vs-rest ROC-AUC
//! - [`explain`]: Grad-CAM heatmaps, overlays, and membership reports
//!
//! Heavy kernels use data parallelism via rayon when the `parallel` feature
//! (on by default) is enabled; every kernel produces bit-identical results
//! regardless of worker count because each output element has a single
//! writer with a fixed reduction order.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod explain;
pub mod image;
pub mod model;
pub(crate) mod par;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// Version string recorded in checkpoints and run manifests.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
