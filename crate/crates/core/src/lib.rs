//! Learned image compression with trellis-coded quantization of the latent.

pub mod bitstream;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod plot;
pub mod quantizer;
pub mod rangecoder;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod trellis;

pub use error::{Error, Result};
