//! Desk-scale melanoma-classification pipeline.
//!
//! Everything rests on a from-scratch reverse-mode autodiff tape so each
//! mechanism stays checkable against independent oracles: color-constancy
//! preprocessing, a small convolutional backbone with a softmax melanoma
//! head, an adversarial hair-classification branch behind a gradient
//! reversal layer, Wasserstein-DCGAN data augmentation with a minimum-MSE
//! diversity filter, and a stratified cross-validated AUC harness.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gda;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use image::Image;
pub use tape::{Activation, BnMode, RunningStats, Tape, Var};
pub use tensor::Tensor;
