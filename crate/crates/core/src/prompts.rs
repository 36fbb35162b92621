//! Class-specific soft prompts and the frozen text-encoder stand-ins.
//!
//! Each class owns `M` learnable context tokens followed by a frozen class
//! token. The text encoder is either a seeded two-layer `tanh` network or a
//! table of precomputed class embeddings loaded from JSON; in both cases the
//! encoder itself is frozen and only the context tokens receive gradient.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// Every class starts from one shared token sequence.
    Template,
    /// Per-class context drawn from N(0, 0.02²).
    Random,
}

const RANDOM_INIT_STD: f64 = 0.02;
const TEMPLATE_STD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct PromptBank {
    pub context: ParamId,
    pub class_tokens: ParamId,
    /// Frozen copy of the template sequence, `M × d_tok`.
    pub template: ParamId,
    pub classes: usize,
    pub length: usize,
    pub token_dim: usize,
}

/// The seeded stand-in for the tokenized hand-written template.
pub fn template_tokens(length: usize, token_dim: usize, seed: u64) -> Tensor {
    rng::normal(&mut rng::stream(seed, "prompt.template", 0), &[length, token_dim], TEMPLATE_STD)
}

pub fn init_prompts(
    store: &mut ParamStore,
    classes: usize,
    length: usize,
    token_dim: usize,
    mode: PromptInit,
    seed: u64,
) -> Result<PromptBank> {
    if length < 1 {
        return Err(Error::param("prompt length M must be at least 1"));
    }
    if classes < 1 || token_dim < 1 {
        return Err(Error::param("prompt bank needs C ≥ 1 and d_tok ≥ 1"));
    }
    let template = template_tokens(length, token_dim, seed);
    let context = match mode {
        PromptInit::Template => {
            let mut data = Vec::with_capacity(classes * length * token_dim);
            for _ in 0..classes {
                data.extend_from_slice(template.data());
            }
            Tensor::new(vec![classes, length, token_dim], data)?
        }
        PromptInit::Random => rng::normal(
            &mut rng::stream(seed, "prompt.random", 0),
            &[classes, length, token_dim],
            RANDOM_INIT_STD,
        ),
    };
    let mut tokens = Vec::with_capacity(classes * token_dim);
    for c in 0..classes {
        let row = rng::normal(&mut rng::stream(seed, "prompt.class", c as u64), &[token_dim], 1.0);
        tokens.extend(row.into_data());
    }
    let class_tokens = Tensor::new(vec![classes, token_dim], tokens)?;

    Ok(PromptBank {
        context: store.add("prompts.context", context, true, ParamGroup::Backbone),
        class_tokens: store.add("prompts.class_tokens", class_tokens, false, ParamGroup::Backbone),
        template: store.add("prompts.template", template, false, ParamGroup::Backbone),
        classes,
        length,
        token_dim,
    })
}

impl PromptBank {
    /// `C × (C·M)` matrix averaging each class's context tokens.
    fn averaging_matrix(&self) -> Tensor {
        let (c, m) = (self.classes, self.length);
        let mut t = Tensor::zeros(&[c, c * m]);
        for i in 0..c {
            for k in 0..m {
                t.data_mut()[i * c * m + i * m + k] = 1.0 / m as f64;
            }
        }
        t
    }

    fn mean_context(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let ctx = tape.param(store, self.context);
        let flat = tape.reshape(ctx, &[self.classes * self.length, self.token_dim])?;
        let avg = tape.constant(self.averaging_matrix());
        tape.matmul(avg, flat)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextEncoderSpec {
    Toy { seed: u64 },
    File { path: String },
}

impl Default for TextEncoderSpec {
    fn default() -> Self {
        TextEncoderSpec::Toy { seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub enum TextEncoderKind {
    /// `f = tanh(x·W₁)·W₂`
    Toy { w1: ParamId, w2: ParamId },
    /// `f = table[c] + mean_context·P`
    File { table: ParamId, proj: ParamId },
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub kind: TextEncoderKind,
    pub dim: usize,
}

impl TextEncoder {
    pub fn toy(store: &mut ParamStore, token_dim: usize, dim: usize, seed: u64) -> Self {
        let w1 = rng::normal(&mut rng::stream(seed, "text.w1", 0), &[token_dim, dim], (1.0 / token_dim as f64).sqrt());
        let w2 = rng::normal(&mut rng::stream(seed, "text.w2", 0), &[dim, dim], (1.0 / dim as f64).sqrt());
        Self {
            kind: TextEncoderKind::Toy {
                w1: store.add("text.w1", w1, false, ParamGroup::Backbone),
                w2: store.add("text.w2", w2, false, ParamGroup::Backbone),
            },
            dim,
        }
    }

    /// Encoder backed by a `C × d` table of class embeddings.
    pub fn from_table(store: &mut ParamStore, table: Tensor, token_dim: usize, seed: u64) -> Result<Self> {
        if !table.is_matrix() {
            return Err(Error::Contract("embedding table must be C × d".into()));
        }
        table.row_l2_normalize()?;
        let dim = table.cols();
        let proj = rng::normal(&mut rng::stream(seed, "text.proj", 0), &[token_dim, dim], (1.0 / token_dim as f64).sqrt());
        Ok(Self {
            kind: TextEncoderKind::File {
                table: store.add("text.table", table, false, ParamGroup::Backbone),
                proj: store.add("text.proj", proj, false, ParamGroup::Backbone),
            },
            dim,
        })
    }

    fn check_bank(&self, store: &ParamStore, bank: &PromptBank) -> Result<()> {
        let (token_dim, table_rows) = match &self.kind {
            TextEncoderKind::Toy { w1, .. } => (store.value(*w1).rows(), None),
            TextEncoderKind::File { table, proj } => (store.value(*proj).rows(), Some(store.value(*table).rows())),
        };
        if token_dim != bank.token_dim {
            return Err(Error::dim("encode_classes", &[bank.token_dim], &[token_dim]));
        }
        if let Some(rows) = table_rows {
            if rows != bank.classes {
                return Err(Error::dim("encode_classes", &[bank.classes], &[rows]));
            }
        }
        Ok(())
    }

    /// Encodes an input token summary `x` (`C × d_tok`).
    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var, mean_ctx: Var) -> Result<Var> {
        match &self.kind {
            TextEncoderKind::Toy { w1, w2 } => {
                let w1 = tape.param(store, *w1);
                let w2 = tape.param(store, *w2);
                let h = tape.matmul(x, w1)?;
                let h = tape.tanh(h);
                tape.matmul(h, w2)
            }
            TextEncoderKind::File { table, proj } => {
                let table = tape.param(store, *table);
                let proj = tape.param(store, *proj);
                let shift = tape.matmul(mean_ctx, proj)?;
                tape.add(table, shift)
            }
        }
    }
}

/// Text features `F_t` (`C × d`) with gradient flowing into the context tokens.
pub fn encode_classes(tape: &mut Tape, store: &ParamStore, bank: &PromptBank, enc: &TextEncoder) -> Result<Var> {
    enc.check_bank(store, bank)?;
    let mean_ctx = bank.mean_context(tape, store)?;
    let cls = tape.param(store, bank.class_tokens);
    let x = tape.add(mean_ctx, cls)?;
    enc.apply(tape, store, x, mean_ctx)
}

/// Frozen template embeddings as a `d × C` matrix with unit columns.
pub fn prior_embeddings(store: &ParamStore, bank: &PromptBank, enc: &TextEncoder) -> Result<Tensor> {
    enc.check_bank(store, bank)?;
    let rows = match &enc.kind {
        TextEncoderKind::File { table, .. } => store.value(*table).clone(),
        TextEncoderKind::Toy { .. } => {
            let mut tape = Tape::no_grad();
            let template = store.value(bank.template);
            let mean: Vec<f64> = (0..bank.token_dim)
                .map(|j| (0..bank.length).fold(0.0, |s, m| s + template.get(m, j)) / bank.length as f64)
                .collect();
            let mut x = store.value(bank.class_tokens).clone();
            for (i, v) in x.data_mut().iter_mut().enumerate() {
                *v += mean[i % bank.token_dim];
            }
            let xv = tape.constant(x);
            let out = enc.apply(&mut tape, store, xv, xv)?;
            tape.value(out).clone()
        }
    };
    rows.row_l2_normalize()?.transpose()
}

/// Precomputed class embeddings on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingsFile {
    pub classes: Vec<String>,
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
}

impl EmbeddingsFile {
    pub fn validate(&self) -> Result<()> {
        if self.embeddings.len() != self.classes.len() {
            return Err(Error::Format(format!(
                "{} class names but {} embedding rows",
                self.classes.len(),
                self.embeddings.len()
            )));
        }
        if self.dim == 0 {
            return Err(Error::Format("embedding dim must be positive".into()));
        }
        for (i, row) in self.embeddings.iter().enumerate() {
            if row.len() != self.dim {
                return Err(Error::Format(format!("row {i} has length {}, expected {}", row.len(), self.dim)));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("row {i} contains a non-finite value")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text)?;
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn table(&self) -> Result<Tensor> {
        self.validate()?;
        Tensor::from_rows(&self.embeddings)
    }
}
