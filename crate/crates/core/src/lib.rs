//! Sensor-agnostic masked-autoencoder pretraining for multispectral remote sensing.
//!
//! Every band of every sensor is its own modality: bands are tokenized
//! independently, tagged with a learned spectral embedding and a learned
//! positional embedding, and reconstructed by a ViT encoder/decoder from a
//! random subset of visible patches. Training draws a dataset and a random
//! band subset per micro-batch and sums gradients over several micro-batches
//! before each optimizer step.

pub mod ablation;
pub mod autodiff;
pub mod bands;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod mae;
pub mod params;
pub mod probe;
pub mod raster;
pub mod sampler;
pub mod tensor;
pub mod train;
pub mod tokens;

pub use error::{Error, Result};
