//! Mask IoU, precision at IoU thresholds, and evaluation reports.

use std::fmt::Write as _;

use crate::autograd::Tape;
use crate::balance::{resize_nearest, MaskPrediction};
use crate::dataset::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::model::Vlt;
use crate::params::ParamStore;
use crate::raster::Mask;
use crate::tensor::Tensor;
use crate::text::MASKWORD;
use crate::train::word_importance;

pub const THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// `|pred ∩ target| / |pred ∪ target|`, defined as 1 when both are empty.
pub fn iou(pred: &Mask, target: &Mask) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(shape_err("iou", &[pred.height, pred.width], &[target.height, target.width]));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Fraction of IoUs strictly above each threshold.
pub fn precision_at(thresholds: &[f64], ious: &[f64]) -> Result<Vec<f64>> {
    if ious.is_empty() {
        return Err(Error::Invalid("precision over zero samples".into()));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Invalid("thresholds must be sorted ascending".into()));
    }
    let n = ious.len() as f64;
    Ok(thresholds
        .iter()
        .map(|&x| ious.iter().filter(|&&v| v > x).count() as f64 / n)
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fingerprint: String,
    pub seed: u64,
    pub mask_eval: bool,
    pub mean_iou: f64,
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    /// `(sample id, IoU)` ordered by sample id.
    pub per_sample: Vec<(usize, f64)>,
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
}

impl EvalReport {
    pub fn from_ious(fingerprint: &str, seed: u64, mask_eval: bool, mut per_sample: Vec<(usize, f64)>) -> Result<Self> {
        per_sample.sort_by_key(|&(id, _)| id);
        let ious: Vec<f64> = per_sample.iter().map(|&(_, v)| v).collect();
        let precision = precision_at(&THRESHOLDS, &ious)?;
        Ok(Self {
            fingerprint: fingerprint.to_string(),
            seed,
            mask_eval,
            mean_iou: ious.iter().sum::<f64>() / ious.len() as f64,
            thresholds: THRESHOLDS.to_vec(),
            precision,
            per_sample,
        })
    }

    /// Column names of [`EvalReport::summary_row`].
    pub fn summary_header(&self) -> String {
        let mut h = String::from("variant\tmean_iou");
        for t in &self.thresholds {
            write!(h, "\tpr@{t}").expect("string write");
        }
        h.push_str("\tsamples\tmask_eval\tfingerprint\tseed");
        h
    }

    pub fn summary_row(&self, variant: &str) -> String {
        let mut r = format!("{variant}\t{:.6}", self.mean_iou);
        for p in &self.precision {
            write!(r, "\t{p:.6}").expect("string write");
        }
        write!(
            r,
            "\t{}\t{}\t{}\t{}",
            self.per_sample.len(),
            self.mask_eval,
            self.fingerprint,
            self.seed
        )
        .expect("string write");
        r
    }

    /// `#` header block, then one `sample<TAB>iou` line per sample. Floats
    /// use the shortest representation that parses back exactly.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let thresholds: Vec<String> = self.thresholds.iter().map(f64::to_string).collect();
        let precision: Vec<String> = self.precision.iter().map(f64::to_string).collect();
        writeln!(s, "# fingerprint\t{}", self.fingerprint).unwrap();
        writeln!(s, "# seed\t{}", self.seed).unwrap();
        writeln!(s, "# mask_eval\t{}", self.mask_eval).unwrap();
        writeln!(s, "# precision counts IoU > X").unwrap();
        writeln!(s, "# mean_iou\t{}", self.mean_iou).unwrap();
        writeln!(s, "# thresholds\t{}", thresholds.join("\t")).unwrap();
        writeln!(s, "# precision\t{}", precision.join("\t")).unwrap();
        writeln!(s, "sample\tiou").unwrap();
        for (id, v) in &self.per_sample {
            writeln!(s, "{id}\t{v}").unwrap();
        }
        s
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut r = EvalReport {
            fingerprint: String::new(),
            seed: 0,
            mask_eval: false,
            mean_iou: f64::NAN,
            thresholds: Vec::new(),
            precision: Vec::new(),
            per_sample: Vec::new(),
        };
        let bad = |line: &str| Error::Format(format!("unexpected report line `{line}`"));
        for line in text.lines() {
            if let Some(h) = line.strip_prefix("# ") {
                let mut parts = h.split('\t');
                let key = parts.next().unwrap_or_default();
                let vals: Vec<&str> = parts.collect();
                let one = || vals.first().copied().ok_or_else(|| bad(line));
                match key {
                    "fingerprint" => r.fingerprint = one()?.to_string(),
                    "seed" => r.seed = one()?.parse().map_err(|_| bad(line))?,
                    "mask_eval" => r.mask_eval = one()?.parse().map_err(|_| bad(line))?,
                    "mean_iou" => r.mean_iou = parse_f64(one()?)?,
                    "thresholds" => r.thresholds = vals.iter().map(|v| parse_f64(v)).collect::<Result<_>>()?,
                    "precision" => r.precision = vals.iter().map(|v| parse_f64(v)).collect::<Result<_>>()?,
                    _ => {}
                }
            } else if line == "sample\tiou" || line.is_empty() {
                continue;
            } else {
                let (id, v) = line.split_once('\t').ok_or_else(|| bad(line))?;
                r.per_sample.push((id.parse().map_err(|_| bad(line))?, parse_f64(v)?));
            }
        }
        if r.mean_iou.is_nan() || r.thresholds.len() != r.precision.len() {
            return Err(Error::Format("incomplete report header".into()));
        }
        Ok(r)
    }
}

/// Options for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub threshold: f64,
    /// Erase each sample's most important word before predicting.
    pub mask_eval: bool,
}

/// Prediction for one image and token sequence, with the importance of each
/// word position.
pub fn predict(
    model: &Vlt,
    store: &ParamStore,
    image: &Tensor,
    tokens: &[usize],
    threshold: f64,
) -> Result<(MaskPrediction, Vec<f64>)> {
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, store, image, tokens)?;
    let importance = word_importance(&tape, &out);
    let logits = tape.value(out.mask.logits).clone();
    Ok((MaskPrediction::from_logits(logits, threshold), importance))
}

/// Replaces the highest-importance real word with the mask token. Ties go to
/// the earliest position; single-word sentences are left alone.
pub fn erase_top_word(tokens: &[usize], importance: &[f64]) -> Vec<usize> {
    let n = tokens.len().min(importance.len());
    let mut out = tokens.to_vec();
    if n > 1 {
        let mut best = 0;
        for i in 1..n {
            if importance[i] > importance[best] {
                best = i;
            }
        }
        out[best] = MASKWORD;
    }
    out
}

/// IoU of every sample, in sample order.
pub fn sample_ious(model: &Vlt, store: &ParamStore, dataset: &Dataset, opts: EvalOptions) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let (pred, importance) = predict(model, store, &s.image, &s.token_ids, opts.threshold)?;
        let pred = if opts.mask_eval {
            let erased = erase_top_word(&s.token_ids, &importance);
            predict(model, store, &s.image, &erased, opts.threshold)?.0
        } else {
            pred
        };
        let target = dataset.mask(s);
        let logits = resize_nearest(&pred.logits, target.height, target.width)?;
        let pm = Mask::new(target.height, target.width, MaskPrediction::from_logits(logits, opts.threshold).mask)?;
        out.push((s.id, iou(&pm, target)?));
    }
    Ok(out)
}

pub fn evaluate(
    model: &Vlt,
    store: &ParamStore,
    dataset: &Dataset,
    opts: EvalOptions,
    fingerprint: &str,
    seed: u64,
) -> Result<EvalReport> {
    let ious = sample_ious(model, store, dataset, opts)?;
    EvalReport::from_ious(fingerprint, seed, opts.mask_eval, ious)
}
