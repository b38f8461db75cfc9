//! Post-norm transformer encoder/decoder with multi-head attention and fixed
//! 2-D sine positional embeddings.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `(h·w) × dim` table. The first half of the channels encodes the row index,
/// the second half the column index, each as interleaved sin/cos over a
/// geometric frequency ladder with base 10000.
pub fn sine_embedding_2d(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "sine embedding needs dim divisible by 4");
    let half = dim / 2;
    let mut data = vec![0.0; h * w * dim];
    for y in 0..h {
        for x in 0..w {
            let row = &mut data[(y * w + x) * dim..(y * w + x + 1) * dim];
            for (offset, p) in [(0, y as f64), (half, x as f64)] {
                for i in 0..half / 2 {
                    let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
                    row[offset + 2 * i] = (p * freq).sin();
                    row[offset + 2 * i + 1] = (p * freq).cos();
                }
            }
        }
    }
    Tensor::from_parts(vec![h * w, dim], data)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    dim: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(store, rng, &format!("{name}.k"), dim, dim, true)?,
            v: Linear::new(store, rng, &format!("{name}.v"), dim, dim, true)?,
            out: Linear::new(store, rng, &format!("{name}.out"), dim, dim, true)?,
            heads,
            dim,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * (self.dim * self.dim + self.dim)
    }

    /// Output plus each head's `n_q × n_k` attention weights.
    pub fn forward_with_weights(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let dk = self.dim / self.heads;
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, key)?;
        let v = self.v.forward(tape, store, value)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * dk, dk)?,
                    tape.slice(k, 1, h * dk, dk)?,
                    tape.slice(v, 1, h * dk, dk)?,
                )
            };
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax(logits, 1)?;
            outs.push(tape.matmul(a, vh)?);
            weights.push(a);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        Ok((self.out.forward(tape, store, cat)?, weights))
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, query, key, value)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, 4 * dim, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * dim, dim, true)?,
        })
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.fc2.forward(tape, store, h)
    }

    fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

fn residual_norm(
    tape: &mut Tape,
    store: &ParamStore,
    norm: &LayerNorm,
    x: Var,
    sub: Var,
) -> Result<Var> {
    let s = tape.add(x, sub)?;
    norm.forward(tape, store, s)
}

#[derive(Clone, Debug)]
pub struct Transformer {
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pos: Option<Tensor>,
    per_layer: bool,
}

impl Transformer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let (d, eps) = (cfg.dim, cfg.ln_eps);
        let mut encoder = Vec::with_capacity(cfg.layers_enc);
        for i in 0..cfg.layers_enc {
            let n = format!("enc{i}");
            encoder.push(EncoderLayer {
                attn: MultiHeadAttention::new(store, rng, &format!("{n}.attn"), d, cfg.heads)?,
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, eps)?,
                ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, eps)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.layers_dec);
        for i in 0..cfg.layers_dec {
            let n = format!("dec{i}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(store, rng, &format!("{n}.self_attn"), d, cfg.heads)?,
                norm1: LayerNorm::new(store, &format!("{n}.norm1"), d, eps)?,
                cross_attn: MultiHeadAttention::new(store, rng, &format!("{n}.cross_attn"), d, cfg.heads)?,
                norm2: LayerNorm::new(store, &format!("{n}.norm2"), d, eps)?,
                ffn: FeedForward::new(store, rng, &format!("{n}.ffn"), d)?,
                norm3: LayerNorm::new(store, &format!("{n}.norm3"), d, eps)?,
            });
        }
        let fs = cfg.feature_size();
        let pos = cfg.pos_enabled.then(|| sine_embedding_2d(fs, fs, d));
        Ok(Self {
            encoder,
            decoder,
            pos,
            per_layer: cfg.pos_per_layer,
        })
    }

    pub fn num_params(&self) -> usize {
        let enc: usize = self
            .encoder
            .iter()
            .map(|l| l.attn.num_params() + l.norm1.num_params() + l.ffn.num_params() + l.norm2.num_params())
            .sum();
        let dec: usize = self
            .decoder
            .iter()
            .map(|l| {
                l.self_attn.num_params()
                    + l.cross_attn.num_params()
                    + l.norm1.num_params()
                    + l.norm2.num_params()
                    + l.norm3.num_params()
                    + l.ffn.num_params()
            })
            .sum();
        enc + dec
    }

    pub fn positional_embedding(&self) -> Option<&Tensor> {
        self.pos.as_ref()
    }

    /// Memory features `F_mem` (`HW × C`) from the flattened fused map.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, fused: Var) -> Result<Var> {
        let pos = match &self.pos {
            Some(p) => Some(tape.constant(p.clone())),
            None => None,
        };
        let mut x = match pos {
            Some(p) if !self.per_layer => tape.add(fused, p)?,
            _ => fused,
        };
        for layer in &self.encoder {
            let qk = match pos {
                Some(p) if self.per_layer => tape.add(x, p)?,
                _ => x,
            };
            let a = layer.attn.forward(tape, store, qk, qk, x)?;
            x = residual_norm(tape, store, &layer.norm1, x, a)?;
            let f = layer.ffn.forward(tape, store, x)?;
            x = residual_norm(tape, store, &layer.norm2, x, f)?;
        }
        Ok(x)
    }

    /// Responses `F_r` (`N_q × C`). Queries interact through self-attention, so
    /// each response depends on every query.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        memory: Var,
    ) -> Result<Var> {
        let key = match (&self.pos, self.per_layer) {
            (Some(p), true) => {
                let p = tape.constant(p.clone());
                tape.add(memory, p)?
            }
            _ => memory,
        };
        let mut x = queries;
        for layer in &self.decoder {
            let a = layer.self_attn.forward(tape, store, x, x, x)?;
            x = residual_norm(tape, store, &layer.norm1, x, a)?;
            let c = layer.cross_attn.forward(tape, store, x, key, memory)?;
            x = residual_norm(tape, store, &layer.norm2, x, c)?;
            let f = layer.ffn.forward(tape, store, x)?;
            x = residual_norm(tape, store, &layer.norm3, x, f)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sine_table_is_bounded_and_deterministic() {
        let a = sine_embedding_2d(3, 4, 8);
        assert_eq!(a, sine_embedding_2d(3, 4, 8));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // position (0,0): sin terms 0, cos terms 1
        assert_eq!(a.row(0), &[0., 1., 0., 1., 0., 1., 0., 1.]);
        // rows differ pairwise
        for i in 0..12 {
            for j in i + 1..12 {
                assert_ne!(a.row(i), a.row(j));
            }
        }
    }

    #[test]
    fn single_key_returns_projected_value() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mha = MultiHeadAttention::new(&mut store, &mut rng, "m", 4, 1).unwrap();
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[vec![1., 2., 3., 4.], vec![0., 0., 1., 0.]]).unwrap());
        let kv = tape.constant(Tensor::from_rows(&[vec![0.5, -1., 2., 0.]]).unwrap());
        let (out, w) = mha.forward_with_weights(&mut tape, &store, q, kv, kv).unwrap();
        assert_eq!(tape.value(w[0]).data(), &[1.0, 1.0]);
        let v = mha.v.forward(&mut tape, &store, kv).unwrap();
        let expect = mha.out.forward(&mut tape, &store, v).unwrap();
        assert!(tape.value(out).row(0) == tape.value(expect).row(0));
    }

    #[test]
    fn indivisible_heads_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, &mut rng, "m", 6, 4),
            Err(Error::Config(_))
        ));
    }
}
