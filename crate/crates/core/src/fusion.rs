//! Multi-modal fusion of word features with the vision map.
//!
//! Spatial-dynamic fusion lets every pixel attend over the words:
//!
//! ```text
//! A_sd   = softmax_words( K_v(F_vr) · K_t(F_t)ᵀ / √C )      (HW × N_t)
//! F_sdl  = A_sd · V_t(F_t)                                   (HW × C)
//! F_fused = P( F_sdl ‖ F_vr )                                (HW × C)
//! ```
//!
//! All projections are 1×1 (pointwise), so the module is equivariant to pixel
//! permutations. Padded words get zero attention.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::FusionKind;
use crate::error::{invalid, shape_err, Result};
use crate::nn::{Conv3x3, Linear};
use crate::params::ParamStore;
use crate::text::LanguageFeatures;

#[derive(Clone, Debug)]
pub struct SpatialDynamicFusion {
    pub vision_key: Linear,
    pub word_key: Linear,
    pub word_value: Linear,
    pub out: Linear,
    dim: usize,
}

impl SpatialDynamicFusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, dim: usize) -> Result<Self> {
        Ok(Self {
            vision_key: Linear::new(store, rng, "sdf.vision_key", dim, dim, true)?,
            word_key: Linear::new(store, rng, "sdf.word_key", dim, dim, true)?,
            word_value: Linear::new(store, rng, "sdf.word_value", dim, dim, true)?,
            out: Linear::new(store, rng, "sdf.out", 2 * dim, dim, true)?,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        [&self.vision_key, &self.word_key, &self.word_value, &self.out]
            .iter()
            .map(|l| l.num_params())
            .sum()
    }

    /// `A_sd` as an `HW × N_t` matrix; `vision` is the flattened `HW × C` map.
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vision: Var,
        words: Var,
        word_mask: &[bool],
    ) -> Result<Var> {
        let (_, cv) = tape.value(vision).dims2()?;
        let (nt, ct) = tape.value(words).dims2()?;
        if cv != self.dim || ct != self.dim || nt != word_mask.len() {
            return Err(shape_err("sdf_attention", tape.shape(vision), tape.shape(words)));
        }
        if !word_mask.iter().any(|&m| m) {
            return Err(invalid("sdf_attention: every word position is padding"));
        }
        let kv = self.vision_key.forward(tape, store, vision)?;
        let kt = self.word_key.forward(tape, store, words)?;
        let logits = tape.matmul_nt(kv, kt)?;
        let logits = tape.scale(logits, 1.0 / (self.dim as f64).sqrt());
        tape.masked_softmax(logits, word_mask)
    }

    /// Weighted word features per pixel, concatenated with vision and projected.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        attention: Var,
        words: Var,
        vision: Var,
    ) -> Result<Var> {
        let (hw, nt) = tape.value(attention).dims2()?;
        if tape.shape(words)[0] != nt || tape.shape(vision)[0] != hw {
            return Err(shape_err("sdf_fuse", tape.shape(attention), tape.shape(vision)));
        }
        let vt = self.word_value.forward(tape, store, words)?;
        let sdl = tape.matmul(attention, vt)?;
        let cat = tape.concat(&[sdl, vision], 1)?;
        self.out.forward(tape, store, cat)
    }
}

/// Tile-and-concatenate baseline, optionally followed by four 3×3 convs.
#[derive(Clone, Debug)]
pub struct TileFusion {
    pub out: Linear,
    pub convs: Vec<Conv3x3>,
}

impl TileFusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        extra_convs: bool,
    ) -> Result<Self> {
        let out = Linear::new(store, rng, "tile.out", 2 * dim, dim, true)?;
        let convs = if extra_convs {
            (0..4)
                .map(|i| Conv3x3::new(store, rng, &format!("tile.conv{i}"), dim, dim, 1))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Self { out, convs })
    }

    pub fn num_params(&self) -> usize {
        self.out.num_params() + self.convs.iter().map(Conv3x3::num_params).sum::<usize>()
    }

    /// `sentence`: `1×C`; `vision`: flattened `HW×C` on an `h×w` grid.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sentence: Var,
        vision: Var,
        grid: (usize, usize),
    ) -> Result<Var> {
        let (hw, c) = tape.value(vision).dims2()?;
        if tape.shape(sentence) != [1, c] {
            return Err(shape_err("tile_fuse", tape.shape(sentence), tape.shape(vision)));
        }
        let ones = tape.constant(crate::tensor::Tensor::ones([hw, 1]));
        let tiled = tape.matmul(ones, sentence)?;
        let cat = tape.concat(&[tiled, vision], 1)?;
        let mut x = self.out.forward(tape, store, cat)?;
        if !self.convs.is_empty() {
            let mut m = tape.reshape(x, &[grid.0, grid.1, c])?;
            for conv in &self.convs {
                let y = conv.forward(tape, store, m)?;
                m = tape.relu(y);
            }
            x = tape.reshape(m, &[hw, c])?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Sdf(SpatialDynamicFusion),
    Tile(TileFusion),
}

/// Output of the fusion stage.
#[derive(Clone, Debug)]
pub struct FusedFeature {
    /// `HW × C`.
    pub fused: Var,
    /// `A_sd` (`HW × N_t`) when spatial-dynamic fusion is used.
    pub attention: Option<Var>,
}

impl Fusion {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        kind: FusionKind,
        dim: usize,
    ) -> Result<Self> {
        Ok(match kind {
            FusionKind::Sdf => Fusion::Sdf(SpatialDynamicFusion::new(store, rng, dim)?),
            FusionKind::Tile => Fusion::Tile(TileFusion::new(store, rng, dim, false)?),
            FusionKind::TileConv4 => Fusion::Tile(TileFusion::new(store, rng, dim, true)?),
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            Fusion::Sdf(f) => f.num_params(),
            Fusion::Tile(f) => f.num_params(),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lang: &LanguageFeatures,
        vision: Var,
        grid: (usize, usize),
    ) -> Result<FusedFeature> {
        match self {
            Fusion::Sdf(f) => {
                let a = f.attention(tape, store, vision, lang.words, &lang.word_mask)?;
                let fused = f.fuse(tape, store, a, lang.words, vision)?;
                Ok(FusedFeature {
                    fused,
                    attention: Some(a),
                })
            }
            Fusion::Tile(f) => Ok(FusedFeature {
                fused: f.fuse(tape, store, lang.sentence, vision, grid)?,
                attention: None,
            }),
        }
    }
}
