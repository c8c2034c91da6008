//! Self-supervised probabilistic denoising.
//!
//! A blind-spot U-Net predicts `K` samples of each pixel's clean signal from
//! its surroundings. Combined with a histogram noise model `p(x | s)` those
//! samples form a per-pixel posterior whose mean is the denoised value.
//!
//! The numerical core is generic over [`Scalar`] (`f32` for training and
//! inference, `f64` for gradient checks); the aliases below name the common
//! instantiations.

mod container;
pub mod data;
mod error;
pub mod evaluation;
pub mod inference;
pub mod network;
pub mod noise_model;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use network::{UNet32, UNet64};
pub use scalar::Scalar;

pub type Tensor32 = network::Tensor<f32>;
pub type Tensor64 = network::Tensor<f64>;
pub type Checkpoint32 = training::Checkpoint<f32>;
pub type Checkpoint64 = training::Checkpoint<f64>;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Reproducible generator; `stream` separates independent consumers that share a seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
