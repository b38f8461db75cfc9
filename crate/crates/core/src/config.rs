//! Plain-text `key=value` configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are errors.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionKind {
    /// Spatial-dynamic fusion: per-pixel attention over words.
    Sdf,
    /// Sentence vector tiled over the map and concatenated.
    Tile,
    /// Tiling followed by four extra 3×3 convolutions.
    TileConv4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryKind {
    /// Vision-guided queries from the query generation module.
    Generated,
    /// Fixed learned query embeddings.
    Learnt,
    /// Word features plus the sentence feature used directly as queries.
    Ft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureMode {
    Pooled,
    Flat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Denominator {
    /// Negatives plus the positive of the current term.
    Current,
    /// Negatives plus every positive.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Nearest,
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateSet {
    All,
    PositionRich,
    PositionFree,
}

macro_rules! enum_str {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "`{other}` is not one of {}", [$($name),+].join("|")
                    ))),
                }
            }
        }
        impl $ty {
            pub fn as_str(self) -> &'static str {
                $(if self == $variant { return $name; })+
                unreachable!()
            }
        }
    };
}

enum_str!(FusionKind, "sdf" => FusionKind::Sdf, "tile" => FusionKind::Tile, "tile_conv4" => FusionKind::TileConv4);
enum_str!(QueryKind, "generated" => QueryKind::Generated, "learnt" => QueryKind::Learnt, "ft" => QueryKind::Ft);
enum_str!(FeatureMode, "pooled" => FeatureMode::Pooled, "flat" => FeatureMode::Flat);
enum_str!(Denominator, "current" => Denominator::Current, "all" => Denominator::All);
enum_str!(Upsample, "nearest" => Upsample::Nearest, "bilinear" => Upsample::Bilinear);
enum_str!(TemplateSet, "all" => TemplateSet::All, "position_rich" => TemplateSet::PositionRich, "position_free" => TemplateSet::PositionFree);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub n_queries: usize,
    pub max_words: usize,
    pub fusion: FusionKind,
    pub query_kind: QueryKind,
    pub share_wv: bool,
    pub qbm: bool,
    pub pos_enabled: bool,
    pub pos_per_layer: bool,
    pub upsample: Upsample,
    pub ln_eps: f64,
}

impl ModelConfig {
    /// Total stride of the image encoder.
    pub const STRIDE: usize = 8;

    pub fn feature_size(&self) -> usize {
        self.image_size / Self::STRIDE
    }

    /// Number of decoder queries actually produced for this configuration.
    pub fn effective_queries(&self) -> usize {
        match self.query_kind {
            QueryKind::Ft => self.max_words + 1,
            _ => self.n_queries,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % Self::STRIDE != 0 {
            return bad(format!(
                "image size {} must be a positive multiple of {}",
                self.image_size,
                Self::STRIDE
            ));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be a multiple of 4 (2-D sine embedding)", self.dim));
        }
        if self.n_queries == 0 || self.max_words == 0 {
            return bad("n_queries and max_words must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct McLConfig {
    pub lambda: f64,
    pub tau: f64,
    pub n_m: usize,
    /// Cap on same-object partners; `None` takes all available.
    pub n_so: Option<usize>,
    /// Cap on same-image-different-object partners; `None` means ⌊0.1·batch⌋.
    pub n_do: Option<usize>,
    pub feature: FeatureMode,
    pub denominator: Denominator,
    /// Steps trained on segmentation alone before the contrastive term starts.
    pub warmup: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scenes: usize,
    pub templates: TemplateSet,
    pub eval_scenes: usize,
    pub eval_templates: TemplateSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub mcl: McLConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub threshold: f64,
}

impl Default for Config {
    /// Desk-scale preset: C = 32 with two heads, 64×64 images.
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig {
                image_size: 64,
                dim: 32,
                heads: 2,
                layers_enc: 2,
                layers_dec: 2,
                n_queries: 16,
                max_words: 15,
                fusion: FusionKind::Sdf,
                query_kind: QueryKind::Generated,
                share_wv: true,
                qbm: true,
                pos_enabled: true,
                pos_per_layer: false,
                upsample: Upsample::Bilinear,
                ln_eps: 1e-5,
            },
            mcl: McLConfig {
                lambda: 0.1,
                tau: 0.1,
                n_m: 3,
                n_so: None,
                n_do: None,
                feature: FeatureMode::Pooled,
                denominator: Denominator::Current,
                warmup: 0,
            },
            train: TrainConfig {
                steps: 500,
                batch_size: 16,
                lr: 1e-3,
                checkpoint_every: 100,
            },
            data: DataConfig {
                scenes: 100,
                templates: TemplateSet::All,
                eval_scenes: 50,
                eval_templates: TemplateSet::All,
            },
            threshold: 0.5,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "model.image_size",
    "model.nq",
    "model.max_words",
    "transformer.dim",
    "transformer.heads",
    "transformer.layers_enc",
    "transformer.layers_dec",
    "fusion.kind",
    "query.kind",
    "qgm.share_wv",
    "qbm.enabled",
    "pos.enabled",
    "pos.per_layer",
    "decoder.upsample",
    "mcl.lambda",
    "mcl.tau",
    "mcl.n_m",
    "mcl.n_so",
    "mcl.n_do",
    "mcl.feature",
    "mcl.denominator",
    "mcl.warmup",
    "train.steps",
    "train.batch_size",
    "train.lr",
    "train.checkpoint_every",
    "data.scenes",
    "data.templates",
    "data.eval_scenes",
    "data.eval_templates",
    "eval.threshold",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_cap(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" || value == "all" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl Config {
    /// Full-size model: C = 256, eight heads.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.model.dim = 256;
        c.model.heads = 8;
        c
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = parse(key, value)?,
            "model.image_size" => m.image_size = parse(key, value)?,
            "model.nq" => m.n_queries = parse(key, value)?,
            "model.max_words" => m.max_words = parse(key, value)?,
            "transformer.dim" => m.dim = parse(key, value)?,
            "transformer.heads" => m.heads = parse(key, value)?,
            "transformer.layers_enc" => m.layers_enc = parse(key, value)?,
            "transformer.layers_dec" => m.layers_dec = parse(key, value)?,
            "fusion.kind" => m.fusion = value.parse()?,
            "query.kind" => m.query_kind = value.parse()?,
            "qgm.share_wv" => m.share_wv = parse(key, value)?,
            "qbm.enabled" => m.qbm = parse(key, value)?,
            "pos.enabled" => m.pos_enabled = parse(key, value)?,
            "pos.per_layer" => m.pos_per_layer = parse(key, value)?,
            "decoder.upsample" => m.upsample = value.parse()?,
            "mcl.lambda" => self.mcl.lambda = parse(key, value)?,
            "mcl.tau" => self.mcl.tau = parse(key, value)?,
            "mcl.n_m" => self.mcl.n_m = parse(key, value)?,
            "mcl.n_so" => self.mcl.n_so = parse_cap(key, value)?,
            "mcl.n_do" => self.mcl.n_do = parse_cap(key, value)?,
            "mcl.feature" => self.mcl.feature = value.parse()?,
            "mcl.denominator" => self.mcl.denominator = value.parse()?,
            "mcl.warmup" => self.mcl.warmup = parse(key, value)?,
            "train.steps" => self.train.steps = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "data.scenes" => self.data.scenes = parse(key, value)?,
            "data.templates" => self.data.templates = value.parse()?,
            "data.eval_scenes" => self.data.eval_scenes = parse(key, value)?,
            "data.eval_templates" => self.data.eval_templates = value.parse()?,
            "eval.threshold" => self.threshold = parse(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key `{other}`; known keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        self.model.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let cap = |c: Option<usize>| c.map_or("auto".to_string(), |v| v.to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("model.image_size", m.image_size.to_string()),
            ("model.nq", m.n_queries.to_string()),
            ("model.max_words", m.max_words.to_string()),
            ("transformer.dim", m.dim.to_string()),
            ("transformer.heads", m.heads.to_string()),
            ("transformer.layers_enc", m.layers_enc.to_string()),
            ("transformer.layers_dec", m.layers_dec.to_string()),
            ("fusion.kind", m.fusion.as_str().into()),
            ("query.kind", m.query_kind.as_str().into()),
            ("qgm.share_wv", m.share_wv.to_string()),
            ("qbm.enabled", m.qbm.to_string()),
            ("pos.enabled", m.pos_enabled.to_string()),
            ("pos.per_layer", m.pos_per_layer.to_string()),
            ("decoder.upsample", m.upsample.as_str().into()),
            ("mcl.lambda", format!("{:?}", self.mcl.lambda)),
            ("mcl.tau", format!("{:?}", self.mcl.tau)),
            ("mcl.n_m", self.mcl.n_m.to_string()),
            ("mcl.n_so", cap(self.mcl.n_so)),
            ("mcl.n_do", cap(self.mcl.n_do)),
            ("mcl.feature", self.mcl.feature.as_str().into()),
            ("mcl.denominator", self.mcl.denominator.as_str().into()),
            ("mcl.warmup", self.mcl.warmup.to_string()),
            ("train.steps", self.train.steps.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("train.lr", format!("{:?}", self.train.lr)),
            ("train.checkpoint_every", self.train.checkpoint_every.to_string()),
            ("data.scenes", self.data.scenes.to_string()),
            ("data.templates", self.data.templates.as_str().into()),
            ("data.eval_scenes", self.data.eval_scenes.to_string()),
            ("data.eval_templates", self.data.eval_templates.as_str().into()),
            ("eval.threshold", format!("{:?}", self.threshold)),
        ];
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// Short hex digest of the canonical text.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Same-image-different-object cap for the configured batch size.
    pub fn n_do(&self) -> usize {
        self.mcl
            .n_do
            .unwrap_or(self.train.batch_size / 10)
    }
}
