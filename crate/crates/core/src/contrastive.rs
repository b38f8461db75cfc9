//! Batch relationships, probability-guided word masking and the masked
//! contrastive loss.
//!
//! Relative to a batch's initial sample every other member is tagged
//! SISO (same image and object), SIDO (same image, other object) or DI
//! (different image). For each positive `p` the loss term is
//!
//! ```text
//! -log( exp(cos(f_p, f_0)/τ) / Σ_{s ∈ D_p} exp(cos(f_s, f_0)/τ) )
//! ```
//!
//! where `D_p` holds the SIDO features and either `p` alone or every positive.
//! DI members only contribute segmentation loss.

use std::collections::HashMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::{index, SliceRandom};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::config::Denominator;
use crate::dataset::Sample;
use crate::error::{invalid, Error, Result};
use crate::text::MASKWORD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelationshipTag {
    Siso,
    Sido,
    Di,
}

impl RelationshipTag {
    /// `None` when both refer to the same expression.
    pub fn between(initial: &Sample, other: &Sample) -> Option<Self> {
        if initial.image_id != other.image_id {
            Some(RelationshipTag::Di)
        } else if initial.object_id != other.object_id {
            Some(RelationshipTag::Sido)
        } else if initial.expression_id != other.expression_id {
            Some(RelationshipTag::Siso)
        } else {
            None
        }
    }
}

/// Sample ids grouped by image and by object.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    by_object: HashMap<(usize, usize), Vec<usize>>,
    by_image: HashMap<usize, Vec<usize>>,
    len: usize,
}

impl DatasetIndex {
    /// `samples[i].id` must equal `i`.
    pub fn new(samples: &[Sample]) -> Result<Self> {
        let mut by_object: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::Data(format!("sample at position {i} has id {}", s.id)));
            }
            by_object.entry((s.image_id, s.object_id)).or_default().push(i);
            by_image.entry(s.image_id).or_default().push(i);
        }
        Ok(Self {
            by_object,
            by_image,
            len: samples.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn same_object(&self, image: usize, object: usize) -> &[usize] {
        self.by_object.get(&(image, object)).map_or(&[], Vec::as_slice)
    }

    pub fn same_image(&self, image: usize) -> &[usize] {
        self.by_image.get(&image).map_or(&[], Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchEntry {
    pub sample: usize,
    pub tag: RelationshipTag,
}

/// A copy of `source` with one word replaced by the mask token.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedVariant {
    pub source: usize,
    pub token_ids: Vec<usize>,
    pub word: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingBatch {
    pub initial: usize,
    /// Every other member, SISO first, then SIDO, then DI.
    pub entries: Vec<BatchEntry>,
    /// Masked copies; they count as extra SISO positives.
    pub masked: Vec<MaskedVariant>,
}

impl TrainingBatch {
    /// Members drawn from the dataset, masked variants excluded.
    pub fn size(&self) -> usize {
        1 + self.entries.len()
    }

    pub fn sample_ids(&self) -> Vec<usize> {
        std::iter::once(self.initial)
            .chain(self.entries.iter().map(|e| e.sample))
            .collect()
    }

    pub fn count(&self, tag: RelationshipTag) -> usize {
        self.entries.iter().filter(|e| e.tag == tag).count()
    }
}

/// Caps used while filling a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub batch_size: usize,
    /// `None` takes every available SISO partner.
    pub n_so: Option<usize>,
    pub n_do: usize,
}

fn take_shuffled(pool: &mut Vec<usize>, cap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    pool.shuffle(rng);
    let k = cap.min(pool.len());
    pool.drain(..k).collect()
}

/// Fills SISO partners, then SIDO up to `n_do`, then DI. When too few other
/// images exist the remaining slots reuse unpicked SIDO and then SISO samples.
pub fn build_batch(
    index: &DatasetIndex,
    samples: &[Sample],
    initial: usize,
    spec: BatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let init = samples
        .get(initial)
        .ok_or_else(|| invalid(format!("initial sample {initial} out of range")))?;
    let mut siso_pool: Vec<usize> = index
        .same_object(init.image_id, init.object_id)
        .iter()
        .copied()
        .filter(|&i| i != initial)
        .collect();
    let mut sido_pool: Vec<usize> = index
        .same_image(init.image_id)
        .iter()
        .copied()
        .filter(|&i| samples[i].object_id != init.object_id)
        .collect();
    let siso = take_shuffled(&mut siso_pool, spec.n_so.unwrap_or(usize::MAX), rng);
    let sido = take_shuffled(&mut sido_pool, spec.n_do, rng);
    let fixed = 1 + siso.len() + sido.len();
    if spec.batch_size < fixed {
        return Err(invalid(format!(
            "batch size {} cannot hold the initial sample, {} SISO and {} SIDO partners",
            spec.batch_size,
            siso.len(),
            sido.len()
        )));
    }
    let mut remaining = spec.batch_size - fixed;
    let same_image = index.same_image(init.image_id).len();
    let di_available = index.len() - same_image;
    let di: Vec<usize> = if di_available > 0 {
        // positions in the dataset with this image's samples skipped
        let others: Vec<usize> = (0..index.len()).filter(|&i| samples[i].image_id != init.image_id).collect();
        let k = remaining.min(others.len());
        let mut out: Vec<usize> = index::sample(rng, others.len(), k).into_iter().map(|p| others[p]).collect();
        out.sort_unstable();
        out
    } else {
        Vec::new()
    };
    remaining -= di.len();
    let extra_sido = take_shuffled(&mut sido_pool, remaining, rng);
    remaining -= extra_sido.len();
    let extra_siso = take_shuffled(&mut siso_pool, remaining, rng);
    remaining -= extra_siso.len();
    if remaining > 0 {
        return Err(Error::Data(format!(
            "dataset of {} samples cannot fill a batch of {}",
            index.len(),
            spec.batch_size
        )));
    }
    let tagged = |ids: Vec<usize>, tag| ids.into_iter().map(move |sample| BatchEntry { sample, tag });
    let entries = tagged(siso, RelationshipTag::Siso)
        .chain(tagged(extra_siso, RelationshipTag::Siso))
        .chain(tagged(sido, RelationshipTag::Sido))
        .chain(tagged(extra_sido, RelationshipTag::Sido))
        .chain(tagged(di, RelationshipTag::Di))
        .collect();
    Ok(TrainingBatch {
        initial,
        entries,
        masked: Vec::new(),
    })
}

/// `p_m`: softmax of the importances over the first `length` words, zero on padding.
pub fn masking_distribution(importance: &[f64], length: usize) -> Result<Vec<f64>> {
    if length == 0 || length > importance.len() {
        return Err(invalid(format!(
            "masking distribution over {length} words with {} importances",
            importance.len()
        )));
    }
    let valid = &importance[..length];
    let mx = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = valid.iter().map(|a| (a - mx).exp()).collect();
    let z: f64 = p.iter().sum();
    for v in &mut p {
        *v /= z;
    }
    p.resize(importance.len(), 0.0);
    Ok(p)
}

/// Result of [`mask_expression`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExpression {
    pub token_ids: Vec<usize>,
    /// Position that was replaced, if the sentence was long enough.
    pub word: Option<usize>,
}

/// Replaces one word drawn from `p_m` with the mask token. Sentences of at
/// most `n_m` words are returned unchanged. Only the first `importance.len()`
/// tokens are candidates.
pub fn mask_expression(
    token_ids: &[usize],
    importance: &[f64],
    n_m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedExpression> {
    if token_ids.len() <= n_m {
        return Ok(MaskedExpression {
            token_ids: token_ids.to_vec(),
            word: None,
        });
    }
    let length = token_ids.len().min(importance.len());
    let p = masking_distribution(importance, length)?;
    let dist = WeightedIndex::new(&p[..length]).map_err(|e| invalid(format!("masking distribution: {e}")))?;
    let word = dist.sample(rng);
    let mut ids = token_ids.to_vec();
    ids[word] = MASKWORD;
    Ok(MaskedExpression {
        token_ids: ids,
        word: Some(word),
    })
}

/// Cosine similarity of two feature vectors on the tape.
pub fn cosine(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    for v in [a, b] {
        let norm = tape.value(v).data().iter().map(|x| x * x).sum::<f64>();
        if norm == 0.0 {
            return Err(invalid("cosine similarity of a zero-norm feature"));
        }
    }
    let ab = tape.mul(a, b)?;
    let dot = tape.sum(ab);
    let aa = tape.mul(a, a)?;
    let na = tape.sum(aa);
    let bb = tape.mul(b, b)?;
    let nb = tape.sum(bb);
    let n = tape.mul(na, nb)?;
    let n = tape.sqrt(n);
    tape.div(dot, n)
}

/// `log Σ exp(x)` over a rank-1 vector with the maximum factored out.
fn logsumexp(tape: &mut Tape, x: Var) -> Var {
    let mx = tape.value(x).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(x, -mx);
    let e = tape.exp(shifted);
    let s = tape.sum(e);
    let l = tape.log(s);
    tape.add_scalar(l, mx)
}

/// Mean over positives of the InfoNCE term; `None` when there are no positives.
pub fn contrastive_loss(
    tape: &mut Tape,
    initial: Var,
    positives: &[Var],
    negatives: &[Var],
    tau: f64,
    denominator: Denominator,
) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if positives.is_empty() {
        return Ok(None);
    }
    let logit = |tape: &mut Tape, f: Var| -> Result<Var> {
        let c = cosine(tape, f, initial)?;
        Ok(tape.scale(c, 1.0 / tau))
    };
    let pos: Vec<Var> = positives.iter().map(|&p| logit(tape, p)).collect::<Result<_>>()?;
    let neg: Vec<Var> = negatives.iter().map(|&n| logit(tape, n)).collect::<Result<_>>()?;
    let shared = match denominator {
        Denominator::All => {
            let all: Vec<Var> = pos.iter().chain(&neg).copied().collect();
            let cat = tape.concat(&all, 0)?;
            Some(logsumexp(tape, cat))
        }
        Denominator::Current => None,
    };
    let mut terms = Vec::with_capacity(pos.len());
    for &p in &pos {
        let lse = match shared {
            Some(v) => v,
            None => {
                let members: Vec<Var> = std::iter::once(p).chain(neg.iter().copied()).collect();
                let cat = tape.concat(&members, 0)?;
                logsumexp(tape, cat)
            }
        };
        terms.push(tape.sub(lse, p)?);
    }
    let cat = tape.concat(&terms, 0)?;
    Ok(Some(tape.mean(cat)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TemplateSet;
    use crate::dataset::Dataset;
    use crate::tensor::Tensor;

    fn loss_value(pos: &[Vec<f64>], neg: &[Vec<f64>], init: &[f64], tau: f64, d: Denominator) -> f64 {
        let mut tape = Tape::new();
        let i = tape.variable(Tensor::new([init.len()], init.to_vec()).unwrap());
        let p: Vec<Var> = pos.iter().map(|v| tape.constant(Tensor::new([v.len()], v.clone()).unwrap())).collect();
        let n: Vec<Var> = neg.iter().map(|v| tape.constant(Tensor::new([v.len()], v.clone()).unwrap())).collect();
        let l = contrastive_loss(&mut tape, i, &p, &n, tau, d).unwrap().unwrap();
        tape.value(l).item()
    }

    #[test]
    fn closed_form_single_positive_single_negative() {
        let l = loss_value(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], &[2.0, 0.0], 1.0, Denominator::Current);
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-4);
    }

    #[test]
    fn opposite_negatives_at_low_temperature_vanish() {
        let l = loss_value(&[vec![1.0, 1.0]], &[vec![-1.0, -1.0]], &[1.0, 1.0], 0.1, Denominator::Current);
        assert!(l >= 0.0 && l < 1e-6, "{l}");
    }

    #[test]
    fn positive_order_does_not_matter() {
        let a = vec![1.0, 0.2, -0.3];
        let b = vec![0.1, 0.9, 0.4];
        let n = vec![vec![-0.5, 0.5, 0.5]];
        let init = [0.3, 0.3, 0.1];
        for d in [Denominator::Current, Denominator::All] {
            let l1 = loss_value(&[a.clone(), b.clone()], &n, &init, 0.5, d);
            let l2 = loss_value(&[b.clone(), a.clone()], &n, &init, 0.5, d);
            assert!((l1 - l2).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_norm_and_no_positive_cases() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap());
        let z = tape.constant(Tensor::zeros([2]));
        assert!(contrastive_loss(&mut tape, i, &[z], &[], 1.0, Denominator::Current).is_err());
        assert!(contrastive_loss(&mut tape, i, &[], &[i], 1.0, Denominator::Current)
            .unwrap()
            .is_none());
    }

    #[test]
    fn masking_distribution_examples() {
        assert_eq!(masking_distribution(&[0.5; 4], 4).unwrap(), vec![0.25; 4]);
        let p = masking_distribution(&[2.0, 0.0, 0.0, 0.0, 0.0], 3).unwrap();
        let expected = [0.786_986_042_161_598_5, 0.106_506_978_919_200_75, 0.106_506_978_919_200_75];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(&p[3..], &[0.0, 0.0]);
    }

    #[test]
    fn short_sentences_are_not_masked() {
        let mut rng = crate::seeded_rng(0, 0);
        let m = mask_expression(&[5, 6], &[1.0, 1.0], 3, &mut rng).unwrap();
        assert_eq!(m.word, None);
        assert_eq!(m.token_ids, vec![5, 6]);
        let m = mask_expression(&[5, 6, 7, 8], &[0.0, 0.0, 50.0, 0.0], 3, &mut rng).unwrap();
        assert_eq!(m.word, Some(2));
        assert_eq!(m.token_ids, vec![5, 6, MASKWORD, 8]);
    }

    #[test]
    fn batch_takes_all_siso_and_caps_sido() {
        let ds = Dataset::generate(10, 4, 32, TemplateSet::All).unwrap();
        let idx = DatasetIndex::new(&ds.samples).unwrap();
        let mut rng = crate::seeded_rng(1, 0);
        for initial in 0..ds.len() {
            let s = &ds.samples[initial];
            let spec = BatchSpec {
                batch_size: 12,
                n_so: None,
                n_do: 1,
            };
            let b = build_batch(&idx, &ds.samples, initial, spec, &mut rng).unwrap();
            assert_eq!(b.size(), 12);
            let partners = idx.same_object(s.image_id, s.object_id).len() - 1;
            assert_eq!(b.count(RelationshipTag::Siso), partners);
            assert_eq!(b.count(RelationshipTag::Sido), 1);
            for e in &b.entries {
                assert_eq!(RelationshipTag::between(s, &ds.samples[e.sample]), Some(e.tag));
            }
        }
    }

    #[test]
    fn single_image_dataset_falls_back_to_same_image() {
        let ds = Dataset::generate(1, 9, 32, TemplateSet::All).unwrap();
        let idx = DatasetIndex::new(&ds.samples).unwrap();
        let mut rng = crate::seeded_rng(2, 0);
        let n = ds.len();
        let spec = BatchSpec {
            batch_size: n,
            n_so: Some(1),
            n_do: 0,
        };
        let b = build_batch(&idx, &ds.samples, 0, spec, &mut rng).unwrap();
        assert_eq!(b.count(RelationshipTag::Di), 0);
        let mut ids = b.sample_ids();
        ids.sort_unstable();
        assert_eq!(ids, (0..n).collect::<Vec<_>>());
        let too_big = BatchSpec {
            batch_size: n + 1,
            ..spec
        };
        assert!(build_batch(&idx, &ds.samples, 0, too_big, &mut rng).is_err());
    }

    #[test]
    fn batch_smaller_than_required_partners_errors() {
        let ds = Dataset::generate(3, 5, 32, TemplateSet::All).unwrap();
        let idx = DatasetIndex::new(&ds.samples).unwrap();
        let mut rng = crate::seeded_rng(3, 0);
        let spec = BatchSpec {
            batch_size: 1,
            n_so: None,
            n_do: 0,
        };
        assert!(build_batch(&idx, &ds.samples, 0, spec, &mut rng).is_err());
    }
}
