//! Adam training loop, samplers and evaluation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassAwareSampler, Dataset, Labels, Stratification};
use crate::diffcore::{ParamGroup, ParamId, Tape, Tensor};
use crate::encoder::TuneMode;
use crate::error::{Error, Result};
use crate::loss::{LossConfig, LossHyper};
use crate::metrics::{stratified_map, EvalReport};
use crate::model::CapnModel;
use crate::rng;
use crate::tte::{self, Scorer, TteConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Uniform,
    ClassAware,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_gcn: f64,
    pub mode: TuneMode,
    pub sampler: SamplerKind,
    pub loss: LossHyper,
    pub adam: AdamConfig,
    /// Recompute `n_c` and `N` from each batch instead of the full set.
    pub batch_frequencies: bool,
    /// Maximum enlargement for random resize-and-crop; 0 disables it.
    pub augment_e: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr_backbone: 5e-4,
            lr_gcn: 1e-3,
            mode: TuneMode::Full,
            sampler: SamplerKind::ClassAware,
            loss: LossHyper::default(),
            adam: AdamConfig::default(),
            batch_frequencies: false,
            augment_e: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        for (k, v) in [("lr_backbone", self.lr_backbone), ("lr_gcn", self.lr_gcn)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("train.{k} must be positive, got {v}")));
            }
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    moments: HashMap<ParamId, Moments>,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn moment_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.moments.keys().copied().collect();
        ids.sort();
        ids
    }
}

/// Random enlargement by `0..=e_max` pixels followed by a random crop back
/// to the original size.
pub fn random_resized_crop(image: &Tensor, e_max: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let e = rng.random_range(0..=e_max);
    if e == 0 {
        return Ok(image.clone());
    }
    let side = image.shape()[0];
    let big = tte::resize(image, side + e)?;
    let (r, c) = (rng.random_range(0..=e), rng.random_range(0..=e));
    tte::crop(&big, r, c, side)
}

fn gather(ds: &Dataset, indices: &[usize], augment: Option<(usize, &mut ChaCha8Rng)>) -> Result<(Tensor, Labels)> {
    let (h, w) = ds.image_size();
    let per = h * w * 3;
    let mut data = Vec::with_capacity(indices.len() * per);
    match augment {
        Some((e, rng)) => {
            for &i in indices {
                data.extend(random_resized_crop(&ds.image(i), e, rng)?.into_data());
            }
        }
        None => {
            for &i in indices {
                data.extend_from_slice(&ds.images.data()[i * per..(i + 1) * per]);
            }
        }
    }
    Ok((Tensor::new(vec![indices.len(), h, w, 3], data)?, ds.labels.select(indices)))
}

pub struct Trainer<'a> {
    pub model: &'a mut CapnModel,
    pub data: &'a Dataset,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub state: TrainState,
    loss_cfg: LossConfig,
    sampler: Option<ClassAwareSampler>,
    epoch_order: Vec<usize>,
    cursor: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a mut CapnModel, data: &'a Dataset, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        if data.classes() != model.classes {
            return Err(Error::Compatibility(format!(
                "model has C = {} but the dataset has C = {}",
                model.classes,
                data.classes()
            )));
        }
        model.set_mode(cfg.mode)?;
        let loss_cfg = LossConfig::new(cfg.loss.clone(), data.class_counts.clone(), data.len())?;
        // every class must be usable by the loss before any compute
        loss_cfg.weights()?;
        let sampler = match cfg.sampler {
            SamplerKind::ClassAware => Some(ClassAwareSampler::new(&data.labels)?),
            SamplerKind::Uniform => None,
        };
        let moments = model
            .store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| {
                let shape = p.value.shape().to_vec();
                (id, Moments { m: Tensor::zeros(&shape), v: Tensor::zeros(&shape) })
            })
            .collect();
        Ok(Self {
            model,
            data,
            cfg,
            seed,
            state: TrainState {
                step: 0,
                epoch: 0,
                moments,
                history: Vec::new(),
            },
            loss_cfg,
            sampler,
            epoch_order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.len().div_ceil(self.cfg.batch_size)
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss_cfg
    }

    fn batch_seed(&self) -> u64 {
        rng::stream(self.seed, "train.batch", self.state.step as u64).random()
    }

    fn next_indices(&mut self, batch_rng: &mut ChaCha8Rng) -> Vec<usize> {
        let bs = self.cfg.batch_size;
        if let Some(s) = &self.sampler {
            return s.batch(bs, batch_rng);
        }
        if self.cursor >= self.epoch_order.len() {
            self.epoch_order = (0..self.data.len()).collect();
            self.epoch_order
                .shuffle(&mut rng::stream(self.seed, "train.epoch", self.state.epoch as u64));
            self.cursor = 0;
        }
        let end = (self.cursor + bs).min(self.epoch_order.len());
        let out = self.epoch_order[self.cursor..end].to_vec();
        self.cursor = end;
        out
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch_seed = self.batch_seed();
        let mut batch_rng = rng::stream(batch_seed, "train.draw", 0);
        let indices = self.next_indices(&mut batch_rng);
        let augment = (self.cfg.augment_e > 0).then_some((self.cfg.augment_e, &mut batch_rng));
        let (images, labels) = gather(self.data, &indices, augment)?;

        let batch_cfg;
        let loss_cfg = if self.cfg.batch_frequencies {
            let counts: Vec<usize> = labels.column_counts().iter().map(|&n| n.max(1)).collect();
            batch_cfg = LossConfig::new(self.cfg.loss.clone(), counts, labels.samples())?;
            &batch_cfg
        } else {
            &self.loss_cfg
        };

        let mut tape = Tape::new();
        let loss = self.model.loss(&mut tape, &images, &labels.to_tensor(), loss_cfg)?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                batch_seed,
            });
        }
        tape.backward(loss)?;
        self.apply_adam(&tape);
        self.model.head.clamp(&mut self.model.store);

        self.state.history.push(LossRecord {
            step: self.state.step,
            epoch: self.state.epoch,
            loss: value,
        });
        self.state.step += 1;
        Ok(value)
    }

    fn apply_adam(&mut self, tape: &Tape) {
        let t = (self.state.step + 1) as i32;
        let AdamConfig { beta1, beta2, eps } = self.cfg.adam;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        for id in self.state.moment_ids() {
            let Some(g) = tape.param_grad(id) else { continue };
            let lr = match self.model.store.get(id).group {
                ParamGroup::Gcn => self.cfg.lr_gcn,
                ParamGroup::Backbone => self.cfg.lr_backbone,
            };
            let mom = self.state.moments.get_mut(&id).expect("moment");
            let value = &mut self.model.store.get_mut(id).value;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(mom.m.data_mut())
                .zip(mom.v.data_mut())
                .zip(g.data());
            for (((w, m), v), &gi) in it {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }

    pub fn run_epoch(&mut self) -> Result<f64> {
        let steps = self.steps_per_epoch();
        let mut total = 0.0;
        for _ in 0..steps {
            total += self.step()?;
        }
        self.state.epoch += 1;
        Ok(total / steps as f64)
    }

    /// Runs all configured epochs and returns per-epoch mean losses.
    pub fn run(&mut self) -> Result<Vec<f64>> {
        (0..self.cfg.epochs).map(|_| self.run_epoch()).collect()
    }
}

pub fn train(model: &mut CapnModel, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainState> {
    let mut t = Trainer::new(model, data, cfg.clone(), seed)?;
    t.run()?;
    Ok(t.state)
}

/// Probabilities for a test set, optionally with five-crop ensembling.
pub fn predict_dataset(model: &CapnModel, data: &Dataset, tte: Option<&TteConfig>) -> Result<Tensor> {
    if data.classes() != model.classes {
        return Err(Error::Compatibility(format!(
            "checkpoint has C = {} but the dataset has C = {}",
            model.classes,
            data.classes()
        )));
    }
    match tte {
        Some(cfg) => tte::ensemble_predict_batch(model, &data.images, cfg),
        None => model.probabilities(&data.images),
    }
}

pub fn evaluate(model: &CapnModel, data: &Dataset, strat: &Stratification, tte: Option<&TteConfig>) -> Result<(EvalReport, Tensor)> {
    let probs = predict_dataset(model, data, tte)?;
    Ok((stratified_map(&probs, &data.labels, strat)?, probs))
}
