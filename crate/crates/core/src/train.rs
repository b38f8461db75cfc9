//! Training loop: segmentation loss plus the masked contrastive term.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::balance::bce_loss;
use crate::checkpoint;
use crate::config::Config;
use crate::contrastive::{build_batch, contrastive_loss, mask_expression, BatchSpec, DatasetIndex, MaskedVariant, RelationshipTag, TrainingBatch};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{contrastive_feature, ForwardOutput, Vlt};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::query::global_word_importance;
use crate::tensor::Tensor;

/// Stream offset separating batch sampling from the other seeded streams.
const BATCH_STREAM: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub bce: f64,
    pub mcl: f64,
    pub total: f64,
}

impl StepLosses {
    pub fn log_line(&self, lr: f64, seed: u64) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.step, self.bce, self.mcl, self.total, lr, seed
        )
    }
}

pub const LOG_HEADER: &str = "# step\tbce\tmcl\ttotal\tlr\tseed";

/// Word importances for masking: column sums of the query attention, or
/// uniform when the query module has no attention over words.
pub fn word_importance(tape: &Tape, out: &ForwardOutput) -> Vec<f64> {
    match out.queries.attention {
        Some(a) => global_word_importance(tape.value(a)),
        None => vec![1.0; out.lang.word_mask.len()],
    }
}

pub struct Trainer<'a> {
    pub config: Config,
    pub model: Vlt,
    pub store: ParamStore,
    adam: Adam,
    dataset: &'a Dataset,
    index: DatasetIndex,
    step: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &Config, dataset: &'a Dataset) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let (model, store) = Vlt::new(&config.model, dataset.vocab.len(), config.seed)?;
        Self::from_parts(config, dataset, model, store)
    }

    /// Continues from existing parameters with a fresh optimiser state.
    pub fn from_parts(config: &Config, dataset: &'a Dataset, model: Vlt, store: ParamStore) -> Result<Self> {
        let adam = Adam::new(
            AdamConfig {
                lr: config.train.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        Ok(Self {
            config: config.clone(),
            model,
            store,
            adam,
            index: DatasetIndex::new(&dataset.samples)?,
            dataset,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.config.train.batch_size,
            n_so: self.config.mcl.n_so,
            n_do: self.config.n_do(),
        }
    }

    fn batch_rng(&self, step: usize) -> ChaCha8Rng {
        crate::seeded_rng(self.config.seed, BATCH_STREAM + step as u64)
    }

    /// The batch for `step`, a pure function of the seed and the step.
    pub fn batch(&self, step: usize) -> Result<(TrainingBatch, ChaCha8Rng)> {
        let mut rng = self.batch_rng(step);
        let initial = rng.gen_range(0..self.dataset.len());
        let b = build_batch(&self.index, &self.dataset.samples, initial, self.batch_spec(), &mut rng)?;
        Ok((b, rng))
    }

    /// One optimiser update on `batch`; masked variants drawn with `rng` are
    /// recorded in the batch.
    pub fn train_step(&mut self, batch: &mut TrainingBatch, rng: &mut ChaCha8Rng) -> Result<StepLosses> {
        let lambda = if self.step < self.config.mcl.warmup { 0.0 } else { self.config.mcl.lambda };
        let use_mcl = lambda != 0.0;
        let mode = self.config.mcl.feature;
        let mut tape = Tape::new();
        let mut bces: Vec<Var> = Vec::new();
        let mut init_feature = None;
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        batch.masked.clear();
        let members: Vec<(usize, Option<RelationshipTag>)> = std::iter::once((batch.initial, None))
            .chain(batch.entries.iter().map(|e| (e.sample, Some(e.tag))))
            .collect();
        for (id, tag) in members {
            let s = &self.dataset.samples[id];
            let out = self.model.forward(&mut tape, &self.store, &s.image, &s.token_ids)?;
            bces.push(bce_loss(&mut tape, out.mask.logits, &s.target)?);
            if !use_mcl || tag == Some(RelationshipTag::Di) {
                continue;
            }
            let f = contrastive_feature(&mut tape, out.mask.feature, mode)?;
            match tag {
                None => init_feature = Some(f),
                Some(RelationshipTag::Siso) => positives.push(f),
                _ => negatives.push(f),
            }
            if matches!(tag, None | Some(RelationshipTag::Siso)) {
                let importance = word_importance(&tape, &out);
                let m = mask_expression(&s.token_ids, &importance, self.config.mcl.n_m, rng)?;
                if let Some(word) = m.word {
                    let mout = self.model.forward(&mut tape, &self.store, &s.image, &m.token_ids)?;
                    bces.push(bce_loss(&mut tape, mout.mask.logits, &s.target)?);
                    positives.push(contrastive_feature(&mut tape, mout.mask.feature, mode)?);
                    batch.masked.push(MaskedVariant {
                        source: id,
                        token_ids: m.token_ids,
                        word,
                    });
                }
            }
        }
        let cat = tape.concat(&bces, 0)?;
        let bce = tape.mean(cat);
        let mcl = match init_feature {
            Some(f0) => contrastive_loss(
                &mut tape,
                f0,
                &positives,
                &negatives,
                self.config.mcl.tau,
                self.config.mcl.denominator,
            )?,
            None => None,
        };
        let total = match mcl {
            Some(m) => {
                let w = tape.scale(m, lambda);
                tape.add(bce, w)?
            }
            None => bce,
        };
        let losses = StepLosses {
            step: self.step + 1,
            bce: tape.value(bce).item(),
            mcl: mcl.map_or(0.0, |m| tape.value(m).item()),
            total: tape.value(total).item(),
        };
        let ids = batch.sample_ids();
        if !losses.total.is_finite() || tape.nonfinite_op().is_some() {
            return Err(Error::NonFinite(format!(
                "{} at step {} (batch samples {ids:?})",
                tape.nonfinite_op().unwrap_or("loss"),
                losses.step
            )));
        }
        let grads = tape
            .backward(total)
            .map_err(|e| Error::NonFinite(format!("{e} at step {} (batch samples {ids:?})", losses.step)))?;
        self.adam.step(&mut self.store, &grads.into_params());
        self.step += 1;
        Ok(losses)
    }

    /// Runs `steps` updates, logging each and writing checkpoints into
    /// `checkpoint_dir` every `train.checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        steps: usize,
        log: &mut dyn Write,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepLosses>> {
        let mut history = Vec::with_capacity(steps);
        let every = self.config.train.checkpoint_every;
        for _ in 0..steps {
            let (mut batch, mut rng) = self.batch(self.step)?;
            let l = self.train_step(&mut batch, &mut rng)?;
            writeln!(log, "{}", l.log_line(self.config.train.lr, self.config.seed))?;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && l.step % every == 0 {
                    checkpoint::save(&self.store, &dir.join(format!("checkpoint_{:06}.vltw", l.step)))?;
                }
            }
            history.push(l);
        }
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&self.store, &dir.join("final.vltw"))?;
        }
        Ok(history)
    }
}

/// Mean segmentation loss over `ids` without updating anything.
pub fn mean_bce(model: &Vlt, store: &ParamStore, dataset: &Dataset, ids: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for &i in ids {
        let s = &dataset.samples[i];
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, store, &s.image, &s.token_ids)?;
        let l = bce_loss(&mut tape, out.mask.logits, &s.target)?;
        total += tape.value(l).item();
    }
    Ok(total / ids.len().max(1) as f64)
}

/// Copies out every parameter value, in store order.
pub fn snapshot(store: &ParamStore) -> Vec<Tensor> {
    store.ids().map(|id| store.get(id).clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TemplateSet;

    fn small_config() -> Config {
        let mut c = Config::default();
        c.model.image_size = 32;
        c.model.dim = 8;
        c.model.heads = 2;
        c.model.n_queries = 4;
        c.model.layers_enc = 1;
        c.model.layers_dec = 1;
        c.train.batch_size = 10;
        c.mcl.n_do = Some(1);
        c.mcl.n_m = 2;
        c
    }

    #[test]
    fn lambda_zero_is_plain_bce() {
        let ds = Dataset::generate(6, 0, 32, TemplateSet::All).unwrap();
        let mut c = small_config();
        c.mcl.lambda = 0.0;
        let mut t = Trainer::new(&c, &ds).unwrap();
        let (mut b, mut rng) = t.batch(0).unwrap();
        let l = t.train_step(&mut b, &mut rng).unwrap();
        assert_eq!(l.mcl, 0.0);
        assert_eq!(l.total, l.bce);
        assert!(b.masked.is_empty());
    }

    #[test]
    fn mcl_adds_masked_positives_with_shared_targets() {
        let ds = Dataset::generate(6, 0, 32, TemplateSet::PositionRich).unwrap();
        let c = small_config();
        let mut t = Trainer::new(&c, &ds).unwrap();
        let mut any = false;
        for step in 0..4 {
            let (mut b, mut rng) = t.batch(step).unwrap();
            let l = t.train_step(&mut b, &mut rng).unwrap();
            assert!((l.total - (l.bce + c.mcl.lambda * l.mcl)).abs() < 1e-12);
            for m in &b.masked {
                let src = &ds.samples[m.source];
                assert!(src.token_ids.len() > c.mcl.n_m);
                assert_eq!(m.token_ids[m.word], crate::text::MASKWORD);
                any = true;
            }
        }
        assert!(any);
    }

    #[test]
    fn warmup_delays_the_contrastive_term() {
        let ds = Dataset::generate(6, 0, 32, TemplateSet::PositionRich).unwrap();
        let mut c = small_config();
        c.mcl.warmup = 2;
        let mut t = Trainer::new(&c, &ds).unwrap();
        let h = t.run(4, &mut std::io::sink(), None).unwrap();
        assert!(h[..2].iter().all(|l| l.mcl == 0.0 && l.total == l.bce));
        assert!(h[2..].iter().any(|l| l.mcl > 0.0));
    }

    #[test]
    fn same_seed_same_update() {
        let ds = Dataset::generate(6, 1, 32, TemplateSet::All).unwrap();
        let c = small_config();
        let run = || {
            let mut t = Trainer::new(&c, &ds).unwrap();
            t.run(2, &mut std::io::sink(), None).unwrap();
            snapshot(&t.store)
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }
}
