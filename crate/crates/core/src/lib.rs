//! Federated training of a two-stage segmentation cascade (breast mask, then
//! dense-tissue mask) that estimates mammographic percent density.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`nn`]: dense tensors, reverse-mode gradients, Adam and a
//!   small U-Net builder.
//! - [`serialize`]: the `MFLW` weight file format, also used as wire payload.
//! - [`image`], [`preprocess`], [`pgm`]: rasters, masks and the preprocessing
//!   chain applied before each network.
//! - [`phantom`]: deterministic synthetic institutions with exact masks.
//! - [`cascade`]: inference pipeline, percent density and training.
//! - [`federation`]: framed TCP protocol, aggregator and collaborator.
//! - [`stats`]: DSC, MAE, Spearman and Wilcoxon signed-rank.

pub mod cascade;
pub mod error;
pub mod federation;
pub mod image;
pub mod nn;
pub mod pgm;
pub mod phantom;
pub mod preprocess;
pub mod rng;
pub mod serialize;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use image::{BinaryMask, Image};
pub use tensor::{ModelWeights, Scalar, Tensor};
