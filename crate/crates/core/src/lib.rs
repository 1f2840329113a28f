//! Multi-path segmentation network with lossless index pooling and
//! probability-map-guided attention.
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod index_pooling;
pub mod loss_metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor, Var};
