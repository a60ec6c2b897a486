//! Text-guided image colorization.
//!
//! A generator predicts the AB chroma planes of a CIELAB image from its
//! lightness plane and a 256-d embedding of a colour description; a
//! PatchGAN discriminator judges `(L, AB)` stacks. The crate also carries
//! the losses, the alternating Adam trainer, dataset loading, quality
//! metrics and an inference pipeline shared by the CLI and HTTP service.

pub mod colorspace;
pub mod data;
pub mod error;
pub mod imageio;
pub mod models;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod perceptual;
pub mod pipeline;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
