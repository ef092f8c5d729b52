//! Few-shot semantic segmentation with a small latent-diffusion style UNet.

pub mod attention;
pub mod autodiff;
pub mod codec;
pub mod data;
pub mod error;
pub mod generation;
pub mod params;
pub mod runner;
pub mod schedule;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
