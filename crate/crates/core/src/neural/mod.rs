//! Learned key-feature predictor: a small reverse-mode autodiff engine, the
//! convolutional network, its losses, dataset builder, training loop and
//! structured pruning.

pub mod dataset;
mod infer;
pub mod loss;
pub mod network;
pub mod prune;
pub mod tape;
pub mod train;

pub use network::{Architecture, LayerSpec, NetworkModel};
