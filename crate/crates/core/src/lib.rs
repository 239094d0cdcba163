//! A desk-scale, framework-free library for training a miniature
//! EfficientNet-style binary classifier on 96x96 image patches.
//!
//! The pieces:
//!
//! - [`tensor`] — dense f64 tensors with reverse-mode automatic
//!   differentiation (convolution, dense layers, activations, reductions)
//!   and a finite-difference gradient-checking harness.
//! - [`augment`] — deterministic image augmentation: random center cropping
//!   (pad then crop so the informative 32x32 center always survives),
//!   flips, and channel normalization.
//! - [`blocks`] — squeeze-and-excitation, MBConv, and the attention-weighted
//!   feature-fusion head.
//! - [`model`] — EffNet-mini: stem, MBConv stages, fusion head and
//!   classifier, wired by four ablation flags (rcc/rds/ff/attention).
//! - [`metrics`] — accuracy/sensitivity/specificity/F-measure and
//!   rank-based AUC.
//! - [`data`] — synthetic center-signal dataset generation, PPM ingestion,
//!   stratified splitting.
//! - [`train`] — Adam with a milestone learning-rate schedule, the training
//!   loop, evaluation, ablation grids and checkpointing.

pub mod augment;
pub mod blocks;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub(crate) mod perf;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::CounterRng;
pub use tensor::Tensor;
