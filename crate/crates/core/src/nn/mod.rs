//! Minimal CPU neural-network stack for volumetric segmentation.

pub mod act;
pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod norm;
pub mod param;
pub mod tensor;
pub mod unet;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, TrainingMeta};
pub use tensor::Tensor;
pub use unet::{ModelConfig, ResUNet};
