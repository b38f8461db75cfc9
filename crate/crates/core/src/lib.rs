//! Vision-language transformer for referring segmentation, built on a small
//! reverse-mode autodiff engine.

pub mod autograd;
pub mod balance;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod query;
pub mod raster;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;
pub mod transformer;
pub mod vision;

pub use autograd::{Gradients, Tape, Var};
pub use config::Config;
pub use error::{Error, Result};
pub use model::{ForwardOutput, Vlt};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;

/// Independent, reproducible stream `stream` of the generator seeded by `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
