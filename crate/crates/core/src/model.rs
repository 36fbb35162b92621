//! The composed model: prompts → text encoder → GCN + residual, scored
//! against TinyViT image embeddings by scaled cosine similarity.

use serde::{Deserialize, Serialize};

use crate::correlation::{self, CorrelationConfig, CorrelationGraph, CorrelationSource};
use crate::data::Labels;
use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::{FreezeMask, TinyVit, TuneMode, VitConfig};
use crate::error::{Error, Result};
use crate::graphnet::{residual_fuse, GcnStack};
use crate::loss::{db_focal_loss, LossConfig, PredictionHead};
use crate::prompts::{self, EmbeddingsFile, PromptBank, PromptInit, TextEncoder, TextEncoderSpec};
use crate::tte::Scorer;

/// Images per forward pass at inference.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `M`
    pub prompt_length: usize,
    pub token_dim: usize,
    /// Shared embedding width `d`.
    pub embed_dim: usize,
    pub prompt_init: PromptInit,
    pub text_encoder: TextEncoderSpec,
    pub vit: VitConfig,
    pub correlation: CorrelationConfig,
    pub use_gcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_length: 4,
            token_dim: 32,
            embed_dim: 64,
            prompt_init: PromptInit::Template,
            text_encoder: TextEncoderSpec::default(),
            vit: VitConfig::default(),
            correlation: CorrelationConfig::default(),
            use_gcn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_length < 1 || self.token_dim < 1 || self.embed_dim < 1 {
            return Err(Error::Config("prompt_length, token_dim and embed_dim must be positive".into()));
        }
        self.vit.validate()?;
        self.correlation.validate()
    }
}

/// Data the model needs at construction beyond its config.
#[derive(Clone, Debug, Default)]
pub struct ModelInputs {
    /// `C × d` class embeddings for a file-backed text encoder.
    pub text_table: Option<Tensor>,
    /// Training labels for the conditional-probability adjacency.
    pub labels: Option<Labels>,
}

impl ModelInputs {
    /// Loads whatever `cfg` refers to on disk.
    pub fn resolve(cfg: &ModelConfig, labels: Option<&Labels>) -> Result<Self> {
        let text_table = match &cfg.text_encoder {
            TextEncoderSpec::Toy { .. } => None,
            TextEncoderSpec::File { path } => Some(EmbeddingsFile::load(path)?.table()?),
        };
        Ok(Self {
            text_table,
            labels: labels.cloned(),
        })
    }

    /// Stand-in inputs whose values are replaced when a checkpoint loads.
    pub fn placeholder(cfg: &ModelConfig, classes: usize) -> Self {
        Self {
            text_table: matches!(cfg.text_encoder, TextEncoderSpec::File { .. })
                .then(|| Tensor::ones(&[classes, cfg.embed_dim])),
            labels: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CapnModel {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub store: ParamStore,
    pub prompts: PromptBank,
    pub text: TextEncoder,
    pub gcn: Option<GcnStack>,
    pub vit: TinyVit,
    pub head: PredictionHead,
    /// Frozen `A*`, stored at f32 precision like every other array.
    pub adjacency: ParamId,
    /// The graph as built, before storage rounding.
    pub graph: CorrelationGraph,
}

impl CapnModel {
    pub fn new(cfg: ModelConfig, classes: usize, inputs: ModelInputs, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if classes < 1 {
            return Err(Error::Config("model needs at least one class".into()));
        }
        let mut store = ParamStore::new();
        let prompts = prompts::init_prompts(&mut store, classes, cfg.prompt_length, cfg.token_dim, cfg.prompt_init, seed)?;
        let text = match (&cfg.text_encoder, inputs.text_table) {
            (TextEncoderSpec::Toy { seed: s }, _) => TextEncoder::toy(&mut store, cfg.token_dim, cfg.embed_dim, *s),
            (TextEncoderSpec::File { .. }, Some(table)) => {
                if table.rows() != classes || table.cols() != cfg.embed_dim {
                    return Err(Error::Config(format!(
                        "embedding table is {:?}, expected [{classes}, {}]",
                        table.shape(),
                        cfg.embed_dim
                    )));
                }
                TextEncoder::from_table(&mut store, table, cfg.token_dim, seed)?
            }
            (TextEncoderSpec::File { path }, None) => {
                return Err(Error::Config(format!("embedding file {path} was not loaded")))
            }
        };
        let graph = match cfg.correlation.source {
            CorrelationSource::TextPrior => {
                let z = prompts::prior_embeddings(&store, &prompts, &text)?;
                correlation::build_text_prior(&z, cfg.correlation.s, cfg.correlation.tau_prime)?
            }
            CorrelationSource::ConditionalProb => match &inputs.labels {
                Some(l) => correlation::build_conditional(l, cfg.correlation.threshold, cfg.correlation.s, cfg.correlation.tau_prime)?,
                None => CorrelationGraph {
                    adjacency: Tensor::eye(classes),
                    s: cfg.correlation.s,
                    tau_prime: cfg.correlation.tau_prime,
                    source: CorrelationSource::ConditionalProb,
                },
            },
        };
        let adjacency = store.add("graph.adjacency", graph.adjacency.clone(), false, ParamGroup::Gcn);
        let gcn = cfg.use_gcn.then(|| GcnStack::new(&mut store, cfg.embed_dim, seed));
        let vit = TinyVit::new(&mut store, cfg.vit.clone(), cfg.embed_dim, seed)?;
        let head = PredictionHead::new(&mut store);
        store.round_to_f32();
        Ok(Self {
            cfg,
            classes,
            store,
            prompts,
            text,
            gcn,
            vit,
            head,
            adjacency,
            graph,
        })
    }

    pub fn set_mode(&mut self, mode: TuneMode) -> Result<FreezeMask> {
        self.vit.apply_peft(&mut self.store, mode)
    }

    pub fn adjacency(&self) -> &Tensor {
        self.store.value(self.adjacency)
    }

    /// `F_t*` (`C × d`); equals `F_t` when the GCN is disabled.
    pub fn text_features(&self, tape: &mut Tape) -> Result<Var> {
        let ft = prompts::encode_classes(tape, &self.store, &self.prompts, &self.text)?;
        match &self.gcn {
            Some(gcn) => {
                let a = tape.param(&self.store, self.adjacency);
                let h = gcn.forward(tape, &self.store, a, ft)?;
                residual_fuse(tape, ft, h)
            }
            None => Ok(ft),
        }
    }

    /// `z = cos(v, f*)/τ` for a `B × S × S × 3` batch.
    pub fn forward_logits(&self, tape: &mut Tape, images: &Tensor) -> Result<Var> {
        let text = self.text_features(tape)?;
        let v = self.vit.forward(tape, &self.store, images)?;
        self.head.logits(tape, &self.store, v, text)
    }

    pub fn loss(&self, tape: &mut Tape, images: &Tensor, labels: &Tensor, cfg: &LossConfig) -> Result<Var> {
        let z = self.forward_logits(tape, images)?;
        db_focal_loss(tape, z, labels, cfg)
    }

    /// Logits without gradient tracking, in chunks of [`EVAL_CHUNK`].
    pub fn infer_logits(&self, images: &Tensor) -> Result<Tensor> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::dim("infer_logits", s, &[0, 0, 0, 3]));
        }
        let per: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(s[0] * self.classes);
        let mut start = 0;
        while start < s[0] {
            let n = EVAL_CHUNK.min(s[0] - start);
            let mut shape = s.to_vec();
            shape[0] = n;
            let chunk = Tensor::new(shape, images.data()[start * per..(start + n) * per].to_vec())?;
            let mut tape = Tape::no_grad();
            let z = self.forward_logits(&mut tape, &chunk)?;
            out.extend_from_slice(tape.value(z).data());
            start += n;
        }
        Tensor::new(vec![s[0], self.classes], out)
    }

    pub fn predict_probs(&self, images: &Tensor) -> Result<Tensor> {
        self.probabilities(images)
    }
}

impl Scorer for CapnModel {
    fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.infer_logits(batch)
    }
}
