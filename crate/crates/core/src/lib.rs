pub mod augmentation;
pub mod cli;
pub mod config;
pub mod distance;
pub mod error;
pub mod groundtruth;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod scalar;
pub mod stats;
pub mod trainer;
pub mod volumes;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision aliases used by the command-line pipeline.
pub type Volume = volumes::ImageVolume<f32>;
pub type ResUNet32 = nn::ResUNet<f32>;
pub type ResUNet64 = nn::ResUNet<f64>;
pub type Checkpoint32 = nn::Checkpoint<f32>;
pub type Checkpoint64 = nn::Checkpoint<f64>;
