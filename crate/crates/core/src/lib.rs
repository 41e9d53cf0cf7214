//! Semi-supervised segmentation with a dual-decoder network, signed distance
//! maps and boundary-weighted cross-task consistency.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod inference;
mod grid;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{BinaryMask, SignMode, SignedDistanceMap, WeightMap};
pub use network::{Network, NetworkConfig, Normalization};
pub use tensor::Tensor;
