//! Multimodal masked point-cloud reconstruction.
//!
//! Point clouds are tokenized with farthest point sampling and k-nearest
//! neighbour grouping, images are cut into patches, and a cross-attention
//! decoder fuses the two token streams before a small head predicts point
//! offsets around each group center. Training minimizes the symmetric
//! Chamfer distance on a staged schedule that can freeze whole submodules.

pub mod autograd;
pub mod ca_decoder;
pub mod chamfer;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod image_tokenizer;
pub mod model;
pub mod nn;
pub mod pc_encoder;
pub mod training;

pub use error::{Error, Result};
