//! Query balancing and mask decoding.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{sigmoid, Tape, Var};
use crate::config::Upsample;
use crate::error::{shape_err, Result};
use crate::nn::{pointwise, Conv3x3, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Confidence per query from `[Linear(F_q) ‖ F_r]` through two linear layers
/// and a sigmoid; responses are scaled row-wise by their confidence.
#[derive(Clone, Debug)]
pub struct QueryBalance {
    pub query_proj: Linear,
    pub hidden: Linear,
    pub score: Linear,
}

impl QueryBalance {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Result<Self> {
        Ok(Self {
            query_proj: Linear::new(store, rng, "qbm.query_proj", dim, dim, true)?,
            hidden: Linear::new(store, rng, "qbm.hidden", 2 * dim, dim, true)?,
            score: Linear::new(store, rng, "qbm.score", dim, 1, true)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.query_proj.num_params() + self.hidden.num_params() + self.score.num_params()
    }

    /// Returns `(C_q, F_b)` with `C_q: N_q × 1` and `F_b: N_q × C`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        responses: Var,
    ) -> Result<(Var, Var)> {
        if tape.shape(queries) != tape.shape(responses) {
            return Err(shape_err("balance", tape.shape(queries), tape.shape(responses)));
        }
        let q = self.query_proj.forward(tape, store, queries)?;
        let cat = tape.concat(&[q, responses], 1)?;
        let h = self.hidden.forward(tape, store, cat)?;
        let h = tape.relu(h);
        let s = self.score.forward(tape, store, h)?;
        let conf = tape.sigmoid(s);
        let balanced = tape.mul(responses, conf)?;
        Ok((conf, balanced))
    }
}

/// `F_m = F_ve·F_bᵀ` reshaped to `H×W×N_q`, then three 3×3 conv + relu + 2×
/// upsample stages and a final 1×1 conv to one channel.
#[derive(Clone, Debug)]
pub struct MaskDecoder {
    pub convs: [Conv3x3; 3],
    pub out: Linear,
    pub upsample: Upsample,
}

/// Decoder outputs for one sample.
#[derive(Clone, Debug)]
pub struct MaskOutput {
    /// `F_m`, `HW × N_q`.
    pub feature: Var,
    /// `8H × 8W` logits.
    pub logits: Var,
}

impl MaskDecoder {
    pub fn channels(n_queries: usize) -> [usize; 4] {
        let half = (n_queries / 2).max(1);
        [n_queries, n_queries, half, half]
    }

    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, n_queries: usize, upsample: Upsample) -> Result<Self> {
        let [c0, c1, c2, c3] = Self::channels(n_queries);
        Ok(Self {
            convs: [
                Conv3x3::new(store, rng, "mask.conv1", c0, c1, 1)?,
                Conv3x3::new(store, rng, "mask.conv2", c1, c2, 1)?,
                Conv3x3::new(store, rng, "mask.conv3", c2, c3, 1)?,
            ],
            out: Linear::new(store, rng, "mask.out", c3, 1, true)?,
            upsample,
        })
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(Conv3x3::num_params).sum::<usize>() + self.out.num_params()
    }

    /// Only `F_b` and the encoder output enter the decoder.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        balanced: Var,
        encoder_out: Var,
        grid: (usize, usize),
    ) -> Result<MaskOutput> {
        let (hw, c) = tape.value(encoder_out).dims2()?;
        let (nq, cb) = tape.value(balanced).dims2()?;
        if c != cb || hw != grid.0 * grid.1 {
            return Err(shape_err("decode_mask", tape.shape(balanced), tape.shape(encoder_out)));
        }
        let feature = tape.matmul_nt(encoder_out, balanced)?;
        let mut x = tape.reshape(feature, &[grid.0, grid.1, nq])?;
        for conv in &self.convs {
            let y = conv.forward(tape, store, x)?;
            let y = tape.relu(y);
            x = match self.upsample {
                Upsample::Nearest => tape.upsample2x(y)?,
                Upsample::Bilinear => tape.bilinear2x(y)?,
            };
        }
        let y = pointwise(&self.out, tape, store, x)?;
        let (h, w, _) = tape.value(y).dims3()?;
        let logits = tape.reshape(y, &[h, w])?;
        Ok(MaskOutput { feature, logits })
    }
}

/// Nearest-neighbour resize of a 2-D mask.
pub fn resize_nearest(mask: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (mh, mw) = mask.dims2()?;
    if (mh, mw) == (h, w) {
        return Ok(mask.clone());
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = y * mh / h;
        for x in 0..w {
            out.push(mask.data()[sy * mw + x * mw / w]);
        }
    }
    Tensor::new([h, w], out)
}

/// Mean binary cross-entropy between logits and a binary target, the target
/// being resized to the logit resolution first.
pub fn bce_loss(tape: &mut Tape, logits: Var, target: &Tensor) -> Result<Var> {
    let (h, w) = tape.value(logits).dims2()?;
    let t = resize_nearest(target, h, w)?;
    tape.bce_with_logits(logits, &t)
}

/// Logits with derived probabilities and thresholded mask.
#[derive(Clone, Debug)]
pub struct MaskPrediction {
    pub logits: Tensor,
    pub probabilities: Tensor,
    pub mask: Vec<bool>,
}

impl MaskPrediction {
    pub fn from_logits(logits: Tensor, threshold: f64) -> Self {
        let probabilities = logits.map(sigmoid);
        let mask = probabilities.data().iter().map(|&p| p > threshold).collect();
        Self {
            logits,
            probabilities,
            mask,
        }
    }
}
