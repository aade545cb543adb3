//! Trainable substrate: kernels, reverse-mode graph, U-Net, loss, Adam and
//! the epoch loop.

pub mod adam;
pub mod graph;
pub mod loss;
pub mod ops;
pub mod train;
pub mod unet;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Graph, NodeId};
pub use loss::bce_loss;
pub use train::{evaluate_loss, train_epoch, TrainSample};
pub use unet::{unet_forward, UNetConfig};
