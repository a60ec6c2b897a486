//! Generator and PatchGAN discriminator.
//!
//! Generator data flow for the default 256x256 configuration:
//!
//! ```text
//! L (1x256x256) -> [conv,conv]@256 -> down -> [conv,conv]@128 -> down -> [conv,conv]@64
//! S (256)       -> FC 256 -> ReLU -> FC 4096 -> reshape 1x64x64 --------------------(x)
//!                                                                                     |
//!                                                  RRDB(64 ch @64) <------------------+
//!   convT -> 128, cat skip@128, [conv,conv] -> convT -> 256, cat skip@256, [conv,conv]
//!   -> 1x1 conv (2 filters) -> tanh -> AB (2x256x256)
//! ```
//!
//! The text field is multiplied into every feature channel, so a zero
//! embedding zeroes the bottleneck and only the skip connections carry
//! image information to the decoder.

mod checkpoint;
mod config;
mod discriminator;
mod generator;

pub use checkpoint::{Checkpoint, FORMAT_TAG, FORMAT_VERSION};
pub use config::{DiscriminatorConfig, GeneratorConfig, RrdbConfig};
pub use discriminator::{Discriminator, DiscriminatorOutput};
pub use generator::{DenseBlock, Generator, GeneratorTrace, Rrdb};
