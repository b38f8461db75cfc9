//! Dataset splits, training runs and ablation sweeps shared by the binary and
//! the integration tests.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::config::Config;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions, EvalReport};
use crate::model::Vlt;
use crate::params::ParamStore;
use crate::train::{StepLosses, Trainer};

/// Added to the seed when generating the held-out split.
pub const EVAL_SEED_OFFSET: u64 = 1 << 40;

pub fn train_split(cfg: &Config) -> Result<Dataset> {
    Dataset::generate(cfg.data.scenes, cfg.seed, cfg.model.image_size, cfg.data.templates)
}

pub fn eval_split(cfg: &Config) -> Result<Dataset> {
    Dataset::generate(
        cfg.data.eval_scenes,
        cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        cfg.model.image_size,
        cfg.data.eval_templates,
    )
}

pub fn check_image_size(cfg: &Config, ds: &Dataset) -> Result<()> {
    match ds.images.first() {
        Some(img) if (img.height, img.width) != (cfg.model.image_size, cfg.model.image_size) => {
            Err(Error::Config(format!(
                "dataset images are {}×{} but model.image_size is {}",
                img.height, img.width, cfg.model.image_size
            )))
        }
        _ => Ok(()),
    }
}

pub struct TrainedModel {
    pub model: Vlt,
    pub store: ParamStore,
    pub history: Vec<StepLosses>,
}

/// Trains for `cfg.train.steps`, logging to `log` and checkpointing into
/// `checkpoint_dir` when given.
pub fn train(cfg: &Config, ds: &Dataset, log: &mut dyn Write, checkpoint_dir: Option<&Path>) -> Result<TrainedModel> {
    check_image_size(cfg, ds)?;
    let mut t = Trainer::new(cfg, ds)?;
    let history = t.run(cfg.train.steps, log, checkpoint_dir)?;
    Ok(TrainedModel {
        model: t.model,
        store: t.store,
        history,
    })
}

pub fn eval_report(cfg: &Config, m: &TrainedModel, ds: &Dataset, mask_eval: bool) -> Result<EvalReport> {
    let opts = EvalOptions {
        threshold: cfg.threshold,
        mask_eval,
    };
    evaluate(&m.model, &m.store, ds, opts, &cfg.fingerprint(), cfg.seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    Nq,
    Fusion,
    QueryKind,
    Mcl,
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nq" => Ok(Self::Nq),
            "fusion" => Ok(Self::Fusion),
            "query_kind" => Ok(Self::QueryKind),
            "mcl" => Ok(Self::Mcl),
            other => Err(Error::Config(format!("unknown sweep `{other}`; expected nq|fusion|query_kind|mcl"))),
        }
    }
}

impl Sweep {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Sweep::Nq => &["1", "2", "4", "8", "16", "32"],
            Sweep::Fusion => &["tile", "tile_conv4", "sdf"],
            Sweep::QueryKind => &["ft", "learnt", "generated"],
            Sweep::Mcl => &["0", "0.1"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    pub fn key(self) -> &'static str {
        match self {
            Sweep::Nq => "model.nq",
            Sweep::Fusion => "fusion.kind",
            Sweep::QueryKind => "query.kind",
            Sweep::Mcl => "mcl.lambda",
        }
    }

    /// Whether each variant is also scored with its top word erased.
    pub fn with_masked(self) -> bool {
        self == Sweep::Mcl
    }

    /// One config per value, named `key=value`.
    pub fn variants(self, base: &Config, values: &[String]) -> Result<Vec<(String, Config)>> {
        values
            .iter()
            .map(|v| {
                let mut c = base.clone();
                c.set(self.key(), v)?;
                c.model.validate()?;
                Ok((format!("{}={v}", self.key()), c))
            })
            .collect()
    }
}

/// Trains and evaluates every variant, writing the summary header once and
/// one row per evaluation to `out` as soon as it is available.
pub fn run_sweep(
    sweep: Sweep,
    base: &Config,
    values: &[String],
    train_ds: &Dataset,
    eval_ds: &Dataset,
    out: &mut dyn Write,
) -> Result<Vec<(String, EvalReport)>> {
    let mut rows = Vec::new();
    for (name, cfg) in sweep.variants(base, values)? {
        let m = train(&cfg, train_ds, &mut std::io::sink(), None)?;
        let mut evals = vec![(name.clone(), eval_report(&cfg, &m, eval_ds, false)?)];
        if sweep.with_masked() {
            evals.push((format!("{name}/masked"), eval_report(&cfg, &m, eval_ds, true)?));
        }
        for (n, r) in evals {
            if rows.is_empty() {
                writeln!(out, "{}", r.summary_header())?;
            }
            writeln!(out, "{}", r.summary_row(&n))?;
            out.flush()?;
            rows.push((n, r));
        }
    }
    Ok(rows)
}
