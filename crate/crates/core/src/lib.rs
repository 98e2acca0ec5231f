//! Pose-guided person inpainting with a style-modulated U-Net generator,
//! projected feature discriminators, and progressive growth.

pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pose;
pub mod projector;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
