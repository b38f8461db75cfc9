//! Three-stage strided CNN producing the raw vision feature.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::nn::{pointwise, Conv3x3, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const STAGE_CHANNELS: [usize; 2] = [16, 32];

/// Stride-2 conv stages (3→16→32→C, relu). The three stage outputs are
/// nearest-resized to the coarsest grid, projected to C channels and summed.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    stages: [Conv3x3; 3],
    projections: [Linear; 3],
    dim: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Result<Self> {
        let [c1, c2] = STAGE_CHANNELS;
        let stages = [
            Conv3x3::new(store, rng, "vision.stage1", 3, c1, 2)?,
            Conv3x3::new(store, rng, "vision.stage2", c1, c2, 2)?,
            Conv3x3::new(store, rng, "vision.stage3", c2, dim, 2)?,
        ];
        let projections = [
            Linear::new(store, rng, "vision.proj1", c1, dim, true)?,
            Linear::new(store, rng, "vision.proj2", c2, dim, true)?,
            Linear::new(store, rng, "vision.proj3", dim, dim, true)?,
        ];
        Ok(Self {
            stages,
            projections,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        self.stages.iter().map(Conv3x3::num_params).sum::<usize>()
            + self.projections.iter().map(Linear::num_params).sum::<usize>()
    }

    /// `image`: `H×W×3` with values in [0, 1]. Returns `F_vr` as `(H/8)×(W/8)×C`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let (h, w, c) = image.dims3()?;
        let s = ModelConfig::STRIDE;
        if c != 3 {
            return Err(invalid(format!("encode_image: expected 3 channels, got {c}")));
        }
        if h % s != 0 || w % s != 0 {
            return Err(invalid(format!(
                "encode_image: image {h}×{w} must have dims divisible by {s}"
            )));
        }
        let mut x = tape.constant(image.clone());
        let mut outputs = Vec::with_capacity(3);
        for stage in &self.stages {
            let y = stage.forward(tape, store, x)?;
            x = tape.relu(y);
            outputs.push(x);
        }
        let mut sum: Option<Var> = None;
        for (i, (out, proj)) in outputs.into_iter().zip(&self.projections).enumerate() {
            let factor = 1 << (2 - i);
            let resized = if factor > 1 {
                tape.downsample(out, factor)?
            } else {
                out
            };
            let p = pointwise(proj, tape, store, resized)?;
            sum = Some(match sum {
                Some(acc) => tape.add(acc, p)?,
                None => p,
            });
        }
        let f = sum.expect("three stages");
        debug_assert_eq!(tape.shape(f), &[h / s, w / s, self.dim]);
        Ok(f)
    }
}
