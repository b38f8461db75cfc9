//! Input-specific query generation.
//!
//! ```text
//! F_vq = Flatten(Conv³(F_vr))ᵀ                                  (N_q × HW)
//! A_qd = softmax_words( relu(F_vq·W_v) · relu(F_t·W_a)ᵀ / √C )   (N_q × N_t)
//! F_q  = A_qd · relu(F_t·W_t) + relu(F_vq·W_v)                  (N_q × C)
//! ```
//!
//! The same `W_v` appears in both the attention and the residual unless
//! untied through configuration.

use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::{ModelConfig, QueryKind};
use crate::error::{invalid, shape_err, Result};
use crate::nn::Linear;
use crate::params::{init, ParamId, ParamStore};
use crate::text::LanguageFeatures;

#[derive(Clone, Debug)]
pub struct QueryGenerator {
    /// Three pointwise convs reducing C → C → C → N_q.
    pub prep: [Linear; 3],
    pub w_v: ParamId,
    /// Separate residual projection when `W_v` is untied.
    pub w_v_residual: Option<ParamId>,
    pub w_a: ParamId,
    pub w_t: ParamId,
    dim: usize,
    n_queries: usize,
    positions: usize,
}

impl QueryGenerator {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        dim: usize,
        n_queries: usize,
        positions: usize,
        share_wv: bool,
    ) -> Result<Self> {
        let prep = [
            Linear::new(store, rng, "qgm.prep1", dim, dim, true)?,
            Linear::new(store, rng, "qgm.prep2", dim, dim, true)?,
            Linear::new(store, rng, "qgm.prep3", dim, n_queries, true)?,
        ];
        let w_v = store.add("qgm.w_v", init::fan_in(rng, &[positions, dim], positions))?;
        let w_v_residual = if share_wv {
            None
        } else {
            Some(store.add("qgm.w_v_residual", init::fan_in(rng, &[positions, dim], positions))?)
        };
        let w_a = store.add("qgm.w_a", init::fan_in(rng, &[dim, dim], dim))?;
        let w_t = store.add("qgm.w_t", init::fan_in(rng, &[dim, dim], dim))?;
        Ok(Self {
            prep,
            w_v,
            w_v_residual,
            w_a,
            w_t,
            dim,
            n_queries,
            positions,
        })
    }

    pub fn num_params(&self) -> usize {
        let wv = self.positions * self.dim;
        self.prep.iter().map(Linear::num_params).sum::<usize>()
            + wv * if self.w_v_residual.is_some() { 2 } else { 1 }
            + 2 * self.dim * self.dim
    }

    /// `F_vq` (`N_q × HW`) from the flattened `HW × C` vision map.
    pub fn prepare_vision_queries(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vision: Var,
    ) -> Result<Var> {
        let (hw, _) = tape.value(vision).dims2()?;
        if hw != self.positions {
            return Err(shape_err("prepare_vision_queries", tape.shape(vision), &[self.positions]));
        }
        let mut x = self.prep[0].forward(tape, store, vision)?;
        x = tape.relu(x);
        x = self.prep[1].forward(tape, store, x)?;
        x = tape.relu(x);
        x = self.prep[2].forward(tape, store, x)?;
        tape.transpose(x)
    }

    /// `A_qd` (`N_q × N_t`), rows normalised over real words.
    pub fn attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vision_queries: Var,
        words: Var,
        word_mask: &[bool],
    ) -> Result<Var> {
        if !word_mask.iter().any(|&m| m) {
            return Err(invalid("query_attention: no valid words"));
        }
        let w_v = tape.param(store, self.w_v);
        let w_a = tape.param(store, self.w_a);
        let sv = tape.matmul(vision_queries, w_v)?;
        let sv = tape.relu(sv);
        let sa = tape.matmul(words, w_a)?;
        let sa = tape.relu(sa);
        let logits = tape.matmul_nt(sv, sa)?;
        let logits = tape.scale(logits, 1.0 / (self.dim as f64).sqrt());
        tape.masked_softmax(logits, word_mask)
    }

    /// `F_q = A_qd·relu(F_t·W_t) + relu(F_vq·W_v)`.
    pub fn generate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        vision_queries: Var,
        words: Var,
        attention: Var,
    ) -> Result<Var> {
        let w_t = tape.param(store, self.w_t);
        let w_v = tape.param(store, self.w_v_residual.unwrap_or(self.w_v));
        let lt = tape.matmul(words, w_t)?;
        let lt = tape.relu(lt);
        let lang = tape.matmul(attention, lt)?;
        let vis = tape.matmul(vision_queries, w_v)?;
        let vis = tape.relu(vis);
        tape.add(lang, vis)
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }
}

/// Global importance of each word: column sums of `A_qd`. Padded words have
/// zero attention so their importance is zero, and the total equals `N_q`.
pub fn global_word_importance(attention: &crate::tensor::Tensor) -> Vec<f64> {
    let (nq, nt) = (attention.shape()[0], attention.shape()[1]);
    let mut a = vec![0.0; nt];
    for q in 0..nq {
        for (ai, v) in a.iter_mut().zip(attention.row(q)) {
            *ai += v;
        }
    }
    a
}

#[derive(Clone, Debug)]
pub enum QueryModule {
    Generated(QueryGenerator),
    Learnt { embeddings: ParamId, n: usize, dim: usize },
    Ft,
}

/// Queries handed to the transformer decoder.
#[derive(Clone, Debug)]
pub struct QuerySet {
    /// `N_q × C`.
    pub queries: Var,
    /// `A_qd`, for generated queries.
    pub attention: Option<Var>,
    /// `F_vq`, for generated queries.
    pub vision_queries: Option<Var>,
}

impl QueryModule {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let hw = cfg.feature_size() * cfg.feature_size();
        Ok(match cfg.query_kind {
            QueryKind::Generated => QueryModule::Generated(QueryGenerator::new(
                store,
                rng,
                cfg.dim,
                cfg.n_queries,
                hw,
                cfg.share_wv,
            )?),
            QueryKind::Learnt => QueryModule::Learnt {
                embeddings: store.add(
                    "query.learnt",
                    init::uniform(rng, &[cfg.n_queries, cfg.dim], 1.0),
                )?,
                n: cfg.n_queries,
                dim: cfg.dim,
            },
            QueryKind::Ft => QueryModule::Ft,
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            QueryModule::Generated(g) => g.num_params(),
            QueryModule::Learnt { n, dim, .. } => n * dim,
            QueryModule::Ft => 0,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        lang: &LanguageFeatures,
        vision: Var,
    ) -> Result<QuerySet> {
        match self {
            QueryModule::Generated(g) => {
                let fvq = g.prepare_vision_queries(tape, store, vision)?;
                let a = g.attention(tape, store, fvq, lang.words, &lang.word_mask)?;
                let q = g.generate(tape, store, fvq, lang.words, a)?;
                Ok(QuerySet {
                    queries: q,
                    attention: Some(a),
                    vision_queries: Some(fvq),
                })
            }
            QueryModule::Learnt { embeddings, .. } => Ok(QuerySet {
                queries: tape.param(store, *embeddings),
                attention: None,
                vision_queries: None,
            }),
            QueryModule::Ft => Ok(QuerySet {
                queries: tape.concat(&[lang.words, lang.sentence], 0)?,
                attention: None,
                vision_queries: None,
            }),
        }
    }
}
