//! Graph attention point networks: kNN graphs, attention layers with
//! attention pooling, a spatial transformer, classification and part
//! segmentation networks, and the training and evaluation machinery around
//! them, built on a small reverse-mode autodiff tensor core.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
