//! Contrastive (i-Mix) pretraining and multi-task fine-tuning of a small
//! convolutional encoder that estimates sward species composition, herbage
//! mass and sward height from canopy images.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod imix;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, SeededRng, Tensor, Var};
