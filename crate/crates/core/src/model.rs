//! The assembled vision-language transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::balance::{MaskDecoder, MaskOutput, QueryBalance};
use crate::config::{FeatureMode, ModelConfig};
use crate::error::Result;
use crate::fusion::{FusedFeature, Fusion};
use crate::params::ParamStore;
use crate::query::{QueryModule, QuerySet};
use crate::tensor::Tensor;
use crate::text::{LanguageFeatures, TextEncoder};
use crate::transformer::Transformer;
use crate::vision::ImageEncoder;

#[derive(Clone, Debug)]
pub struct Vlt {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub text: TextEncoder,
    pub vision: ImageEncoder,
    pub fusion: Fusion,
    pub query: QueryModule,
    pub transformer: Transformer,
    pub balance: Option<QueryBalance>,
    pub decoder: MaskDecoder,
}

/// Every intermediate a caller may want to inspect or supervise.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub lang: LanguageFeatures,
    /// `F_vr` flattened to `HW × C`.
    pub vision: Var,
    pub fused: FusedFeature,
    pub queries: QuerySet,
    pub memory: Var,
    pub responses: Var,
    pub confidence: Option<Var>,
    pub balanced: Var,
    pub mask: MaskOutput,
}

impl Vlt {
    /// Builds the model and its parameters deterministically from `seed`.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.dim;
        let text = TextEncoder::new(&mut store, &mut rng, vocab_size, c, config.max_words)?;
        let vision = ImageEncoder::new(&mut store, &mut rng, c)?;
        let fusion = Fusion::new(&mut store, &mut rng, config.fusion, c)?;
        let query = QueryModule::new(&mut store, &mut rng, config)?;
        let transformer = Transformer::new(&mut store, &mut rng, config)?;
        let balance = if config.qbm {
            Some(QueryBalance::new(&mut store, &mut rng, c)?)
        } else {
            None
        };
        let decoder = MaskDecoder::new(&mut store, &mut rng, config.effective_queries(), config.upsample)?;
        let model = Self {
            config: config.clone(),
            vocab_size,
            text,
            vision,
            fusion,
            query,
            transformer,
            balance,
            decoder,
        };
        Ok((model, store))
    }

    /// Parameter count summed over components.
    pub fn num_params(&self) -> usize {
        self.text.num_params(self.vocab_size)
            + self.vision.num_params()
            + self.fusion.num_params()
            + self.query.num_params()
            + self.transformer.num_params()
            + self.balance.as_ref().map_or(0, QueryBalance::num_params)
            + self.decoder.num_params()
    }

    pub fn grid(&self) -> (usize, usize) {
        let f = self.config.feature_size();
        (f, f)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: &Tensor,
        tokens: &[usize],
    ) -> Result<ForwardOutput> {
        let grid = self.grid();
        let lang = self.text.encode(tape, store, tokens)?;
        let fvr = self.vision.encode(tape, store, image)?;
        let vision = tape.reshape(fvr, &[grid.0 * grid.1, self.config.dim])?;
        let fused = self.fusion.forward(tape, store, &lang, vision, grid)?;
        let queries = self.query.forward(tape, store, &lang, vision)?;
        let memory = self.transformer.encode(tape, store, fused.fused)?;
        let responses = self.transformer.decode(tape, store, queries.queries, memory)?;
        let (confidence, balanced) = match &self.balance {
            Some(b) => {
                let (c, fb) = b.forward(tape, store, queries.queries, responses)?;
                (Some(c), fb)
            }
            None => (None, responses),
        };
        let mask = self.decoder.forward(tape, store, balanced, memory, grid)?;
        Ok(ForwardOutput {
            lang,
            vision,
            fused,
            queries,
            memory,
            responses,
            confidence,
            balanced,
            mask,
        })
    }
}

/// The vector compared by the contrastive loss, derived from `F_m` (`HW × N_q`).
pub fn contrastive_feature(tape: &mut Tape, feature: Var, mode: FeatureMode) -> Result<Var> {
    let (hw, nq) = tape.value(feature).dims2()?;
    match mode {
        FeatureMode::Pooled => {
            let s = tape.sum_axis(feature, 0)?;
            Ok(tape.scale(s, 1.0 / hw as f64))
        }
        FeatureMode::Flat => tape.reshape(feature, &[1, hw * nq]),
    }
}
