//! Desk-scale directional experiment: CAPN against a BCE baseline, a no-GCN
//! ablation and TTE on a seeded synthetic long-tailed benchmark.

use serde::{Deserialize, Serialize};

use crate::data::{self, stratify, Dataset, GenerateConfig, Split, Stratification, World};
use crate::encoder::VitConfig;
use crate::error::Result;
use crate::loss::LossHyper;
use crate::metrics::EvalReport;
use crate::model::{CapnModel, ModelConfig, ModelInputs};
use crate::prompts::{EmbeddingsFile, TextEncoderSpec};
use crate::trainer::{self, SamplerKind, TrainConfig, Trainer};
use crate::tte::TteConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub classes: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub imbalance_ratio: f64,
    pub snr: f64,
    pub image_size: usize,
    pub jitter: usize,
    pub batch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub adapter_dim: usize,
    pub embed_dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub augment_e: usize,
    pub tte_e: usize,
    pub capn_loss: LossHyper,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            train_samples: 600,
            test_samples: 400,
            imbalance_ratio: 50.0,
            snr: 5.0,
            image_size: 16,
            jitter: 1,
            batch_size: 32,
            width: 32,
            depth: 1,
            heads: 2,
            adapter_dim: 8,
            embed_dim: 64,
            epochs: 40,
            lr: 2e-3,
            augment_e: 2,
            tte_e: 2,
            capn_loss: LossHyper {
                gamma: 0.25,
                kappa: 0.5,
                ..LossHyper::default()
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// DB-focal loss, class-aware sampling, GCN on.
    Capn,
    /// Plain BCE, uniform sampling, GCN on.
    Bce,
    /// CAPN without the GCN and residual path.
    NoGcn,
}

pub struct Benchmark {
    pub train: Dataset,
    pub test: Dataset,
    pub strat: Stratification,
    pub embeddings: EmbeddingsFile,
}

pub fn benchmark(cfg: &DeskConfig, seed: u64) -> Result<Benchmark> {
    let mut g = GenerateConfig::new(cfg.classes, cfg.train_samples, cfg.imbalance_ratio, cfg.snr, seed);
    g.image_size = cfg.image_size;
    g.jitter = cfg.jitter;
    let train = data::generate(&g)?;
    g.split = Split::Test;
    g.samples = cfg.test_samples;
    g.imbalance_ratio = 1.0;
    let test = data::generate(&g)?;
    let strat = stratify(&train.class_counts, 100, 20)?;
    let embeddings = World::new(cfg.classes, cfg.image_size, seed).class_embeddings(cfg.embed_dim, seed);
    Ok(Benchmark {
        train,
        test,
        strat,
        embeddings,
    })
}

pub fn model_config(cfg: &DeskConfig, use_gcn: bool) -> ModelConfig {
    ModelConfig {
        embed_dim: cfg.embed_dim,
        vit: VitConfig {
            image_size: cfg.image_size,
            patch_size: 4,
            depth: cfg.depth,
            width: cfg.width,
            heads: cfg.heads,
            adapter_dim: cfg.adapter_dim,
            ..VitConfig::default()
        },
        text_encoder: TextEncoderSpec::File {
            path: "<in-memory>".into(),
        },
        use_gcn,
        ..ModelConfig::default()
    }
}

pub fn train_config(cfg: &DeskConfig, variant: Variant) -> TrainConfig {
    let (loss, sampler) = match variant {
        Variant::Capn | Variant::NoGcn => (cfg.capn_loss.clone(), SamplerKind::ClassAware),
        Variant::Bce => (LossHyper::bce(), SamplerKind::Uniform),
    };
    TrainConfig {
        epochs: cfg.epochs,
        loss,
        sampler,
        augment_e: cfg.augment_e,
        batch_size: cfg.batch_size,
        lr_backbone: cfg.lr,
        lr_gcn: 2.0 * cfg.lr,
        ..TrainConfig::default()
    }
}

pub fn tte_config(cfg: &DeskConfig) -> TteConfig {
    TteConfig {
        e: cfg.tte_e,
        base_size: cfg.image_size,
        patch_size: 4,
        ..TteConfig::default()
    }
}

pub fn train_variant(cfg: &DeskConfig, bench: &Benchmark, variant: Variant, seed: u64) -> Result<CapnModel> {
    let mcfg = model_config(cfg, variant != Variant::NoGcn);
    let inputs = ModelInputs {
        text_table: Some(bench.embeddings.table()?),
        labels: Some(bench.train.labels.clone()),
    };
    let mut model = CapnModel::new(mcfg, cfg.classes, inputs, seed)?;
    Trainer::new(&mut model, &bench.train, train_config(cfg, variant), seed)?.run()?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub capn: EvalReport,
    pub capn_tte: EvalReport,
    pub bce: EvalReport,
    pub no_gcn: EvalReport,
}

impl SeedOutcome {
    pub fn tail_gain(&self) -> bool {
        self.capn.tail_map.unwrap_or(f64::NAN) > self.bce.tail_map.unwrap_or(f64::NAN)
    }

    pub fn gcn_gain(&self) -> bool {
        self.capn.total_map > self.no_gcn.total_map
    }

    /// TTE change in total mAP, in points.
    pub fn tte_delta(&self) -> f64 {
        100.0 * (self.capn_tte.total_map - self.capn.total_map)
    }
}

pub fn run_seed(cfg: &DeskConfig, seed: u64) -> Result<SeedOutcome> {
    let bench = benchmark(cfg, seed)?;
    let eval = |m: &CapnModel, tte: Option<&TteConfig>| trainer::evaluate(m, &bench.test, &bench.strat, tte).map(|r| r.0);
    let capn = train_variant(cfg, &bench, Variant::Capn, seed)?;
    let bce = train_variant(cfg, &bench, Variant::Bce, seed)?;
    let no_gcn = train_variant(cfg, &bench, Variant::NoGcn, seed)?;
    Ok(SeedOutcome {
        seed,
        capn: eval(&capn, None)?,
        capn_tte: eval(&capn, Some(&tte_config(cfg)))?,
        bce: eval(&bce, None)?,
        no_gcn: eval(&no_gcn, None)?,
    })
}
