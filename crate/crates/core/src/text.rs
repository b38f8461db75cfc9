//! Vocabulary, tokenisation and the bidirectional GRU text encoder.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::Linear;
use crate::params::{init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MASKWORD: usize = 2;

const SPECIALS: [&str; 3] = ["<pad>", "<unk>", "<mask>"];

/// Lowercases and splits on whitespace and ASCII punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Specials first (PAD = 0, UNK, MASKWORD), then `words` in order, deduplicated.
    pub fn new<S: AsRef<str>>(words: &[S]) -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for w in SPECIALS.iter().copied().chain(words.iter().map(AsRef::as_ref)) {
            if !v.ids.contains_key(w) {
                v.ids.insert(w.to_owned(), v.tokens.len());
                v.tokens.push(w.to_owned());
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_owned()).collect();
        if tokens.first().map(String::as_str) != Some(SPECIALS[PAD]) {
            return Err(Error::Format(format!(
                "vocabulary line 0 must be `{}`",
                SPECIALS[PAD]
            )));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Format(format!("vocabulary line {i} is empty")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if ids.get(*s) != Some(&i) {
                return Err(Error::Format(format!("special token `{s}` must be on line {i}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }
}

/// Per-word features padded to `N_t` rows, plus a separate sentence vector.
#[derive(Clone, Debug)]
pub struct LanguageFeatures {
    /// `N_t × C`; rows at and beyond `length` are exactly zero.
    pub words: Var,
    /// `1 × C`.
    pub sentence: Var,
    pub length: usize,
    /// True for real words, false for padding.
    pub word_mask: Vec<bool>,
}

#[derive(Clone, Debug)]
struct GruDirection {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
}

impl GruDirection {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            w_ih: store.add(format!("{name}.w_ih"), init::fan_in(rng, &[input, 3 * hidden], hidden))?,
            w_hh: store.add(format!("{name}.w_hh"), init::fan_in(rng, &[hidden, 3 * hidden], hidden))?,
            b_ih: store.add(format!("{name}.b_ih"), Tensor::zeros([3 * hidden]))?,
            b_hh: store.add(format!("{name}.b_hh"), Tensor::zeros([3 * hidden]))?,
        })
    }

    /// Returns the hidden state after each position, in input order.
    fn run(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        xs: Var,
        hidden: usize,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let len = tape.shape(xs)[0];
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b_ih = tape.param(store, self.b_ih);
        let b_hh = tape.param(store, self.b_hh);
        let xw = tape.matmul(xs, w_ih)?;
        let xw = tape.add(xw, b_ih)?;
        let mut h = tape.constant(Tensor::zeros([1, hidden]));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let x_t = tape.slice(xw, 0, t, 1)?;
            let hw = tape.matmul(h, w_hh)?;
            let hw = tape.add(hw, b_hh)?;
            let x_rz = tape.slice(x_t, 1, 0, 2 * hidden)?;
            let h_rz = tape.slice(hw, 1, 0, 2 * hidden)?;
            let rz = tape.add(x_rz, h_rz)?;
            let rz = tape.sigmoid(rz);
            let r = tape.slice(rz, 1, 0, hidden)?;
            let z = tape.slice(rz, 1, hidden, hidden)?;
            let x_n = tape.slice(x_t, 1, 2 * hidden, hidden)?;
            let h_n = tape.slice(hw, 1, 2 * hidden, hidden)?;
            let rh = tape.mul(r, h_n)?;
            let n = tape.add(x_n, rh)?;
            let n = tape.tanh(n);
            // h' = (1 − z)·n + z·h = n + z·(h − n)
            let d = tape.sub(h, n)?;
            let zd = tape.mul(z, d)?;
            h = tape.add(n, zd)?;
            states[t] = h;
        }
        Ok(states)
    }
}

/// Learned embeddings followed by one bidirectional GRU layer.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    embedding: ParamId,
    forward: GruDirection,
    backward: GruDirection,
    word_proj: Linear,
    sentence_proj: Linear,
    hidden: usize,
    dim: usize,
    max_words: usize,
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        vocab_size: usize,
        dim: usize,
        max_words: usize,
    ) -> Result<Self> {
        let hidden = dim / 2;
        let embedding = store.add("text.embedding", init::uniform(rng, &[vocab_size, dim], 0.1))?;
        let forward = GruDirection::new(store, rng, "text.gru_fwd", dim, hidden)?;
        let backward = GruDirection::new(store, rng, "text.gru_bwd", dim, hidden)?;
        let word_proj = Linear::new(store, rng, "text.word_proj", 2 * hidden, dim, true)?;
        let sentence_proj = Linear::new(store, rng, "text.sentence_proj", 2 * hidden, dim, true)?;
        Ok(Self {
            embedding,
            forward,
            backward,
            word_proj,
            sentence_proj,
            hidden,
            dim,
            max_words,
        })
    }

    pub fn num_params(&self, vocab_size: usize) -> usize {
        let h = self.hidden;
        let d = self.dim;
        let gru = d * 3 * h + h * 3 * h + 6 * h;
        vocab_size * d + 2 * gru + self.word_proj.num_params() + self.sentence_proj.num_params()
    }

    /// Encodes at most `max_words` tokens; extra tokens are dropped.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        token_ids: &[usize],
    ) -> Result<LanguageFeatures> {
        if token_ids.is_empty() {
            return Err(invalid("encode_text: empty token list"));
        }
        let ids = &token_ids[..token_ids.len().min(self.max_words)];
        let len = ids.len();
        let table = tape.param(store, self.embedding);
        let emb = tape.gather_rows(table, ids)?;
        let fwd = self.forward.run(tape, store, emb, self.hidden, false)?;
        let bwd = self.backward.run(tape, store, emb, self.hidden, true)?;
        let mut rows = Vec::with_capacity(len);
        for t in 0..len {
            rows.push(tape.concat(&[fwd[t], bwd[t]], 1)?);
        }
        let stacked = tape.concat(&rows, 0)?;
        let projected = self.word_proj.forward(tape, store, stacked)?;
        let words = if len < self.max_words {
            let pad = tape.constant(Tensor::zeros([self.max_words - len, self.dim]));
            tape.concat(&[projected, pad], 0)?
        } else {
            projected
        };
        let last = tape.concat(&[fwd[len - 1], bwd[0]], 1)?;
        let sentence = self.sentence_proj.forward(tape, store, last)?;
        let word_mask = (0..self.max_words).map(|i| i < len).collect();
        Ok(LanguageFeatures {
            words,
            sentence,
            length: len,
            word_mask,
        })
    }
}
