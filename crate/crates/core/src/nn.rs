//! Parameterised building blocks shared by the model components.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// `y = x·W + b` on row vectors; also serves as a 1×1 convolution on a flattened
/// `HW×C` map.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = init::fan_in(rng, &[in_dim, out_dim], in_dim);
        let weight = store.add(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

/// Zero-padded 3×3 convolution on `H×W×C` maps, via im2col + matmul.
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = init::fan_in(rng, &[9 * in_ch, out_ch], 9 * in_ch);
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros([out_ch]))?,
            in_ch,
            out_ch,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (h, w, c) = tape.value(x).dims3()?;
        if c != self.in_ch {
            return Err(shape_err("conv3x3", tape.shape(x), &[self.in_ch]));
        }
        let ho = (h - 1) / self.stride + 1;
        let wo = (w - 1) / self.stride + 1;
        let cols = tape.im2col3x3(x, self.stride)?;
        let wv = tape.param(store, self.weight);
        let bv = tape.param(store, self.bias);
        let y = tape.matmul(cols, wv)?;
        let y = tape.add(y, bv)?;
        tape.reshape(y, &[ho, wo, self.out_ch])
    }

    pub fn num_params(&self) -> usize {
        9 * self.in_ch * self.out_ch + self.out_ch
    }
}

/// Applies a [`Linear`] to each pixel of an `H×W×C` map.
pub fn pointwise(
    layer: &Linear,
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
) -> Result<Var> {
    let (h, w, c) = tape.value(x).dims3()?;
    let flat = tape.reshape(x, &[h * w, c])?;
    let y = layer.forward(tape, store, flat)?;
    tape.reshape(y, &[h, w, layer.out_dim])
}

/// Layer normalisation parameters (γ = 1, β = 0 at init).
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([dim]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([dim]))?,
            eps,
            dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}
