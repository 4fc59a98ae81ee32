//! Saliency-guided conditional adversarial translation of color fundus
//! photographs into fluorescein-angiography-like images.
//!
//! The crate bundles the full pipeline: raster primitives and spatial
//! filters, local saliency maps, the generator/discriminator pair and the
//! frozen perceptual feature extractor, the combined loss, the training
//! loop, PSNR/SSIM evaluation, and a synthetic phantom data source that
//! makes everything runnable and verifiable at desk scale.

pub mod error;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod saliency;

pub use error::{Error, Result};
pub mod cli;
pub mod networks;
pub mod losses;
pub mod data;
pub mod trainer;
pub mod config;
