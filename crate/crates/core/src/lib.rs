//! Low-light raw image enhancement toolkit.
//!
//! A packed RGGB frame is amplified by an exposure ratio and mapped straight
//! to an RGB image by an attention-gated U-Net, trained adversarially against
//! a patch discriminator with an L1 plus multi-scale structural similarity
//! reconstruction objective. Everything runs on CPU with a small reverse-mode
//! autodiff tape; results are bit-reproducible for a fixed seed.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod conv;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod rawproc;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{Tape, ValueId};
pub use tensor::Tensor;

/// CLI entry point; returns the process exit code.
pub fn run() -> i32 {
    cli::run()
}
