#![allow(dead_code)]

use capn::diffcore::{Tape, Tensor};
use capn::encoder::VitConfig;
use capn::loss::{LossConfig, LossHyper};
use capn::model::{CapnModel, ModelConfig, ModelInputs};
use capn::rng;

pub const FD_STEP: f64 = 1e-5;

pub fn tiny_model_config(embed_dim: usize) -> ModelConfig {
    ModelConfig {
        prompt_length: 2,
        token_dim: 4,
        embed_dim,
        vit: VitConfig {
            image_size: 8,
            patch_size: 4,
            depth: 1,
            width: 8,
            heads: 2,
            adapter_dim: 2,
            ..VitConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

fn loss_value(model: &CapnModel, images: &Tensor, labels: &Tensor, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::no_grad();
    let l = model.loss(&mut tape, images, labels, cfg).unwrap();
    tape.value(l).data()[0]
}

/// Worst relative error between tape gradients and central differences over
/// every trainable parameter entry of a C=3, d=8, depth-1 model.
pub fn model_gradcheck(seed: u64) -> f64 {
    let classes = 3;
    let mut model = CapnModel::new(tiny_model_config(8), classes, ModelInputs::default(), seed).unwrap();
    // a zero up-projection would hide the adapter's down-projection gradient
    for b in model.vit.blocks.clone() {
        let up = rng::normal(&mut rng::stream(seed, "gc.up", 0), model.store.value(b.adapter.up).shape(), 0.3);
        model.store.set_value(b.adapter.up, up).unwrap();
    }
    let images = rng::normal(&mut rng::stream(seed, "gc.images", 0), &[4, 8, 8, 3], 1.0);
    let labels = Tensor::from_rows(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 1.0],
        vec![1.0, 0.0, 1.0],
        vec![0.0, 0.0, 1.0],
    ])
    .unwrap();
    let cfg = LossConfig::new(LossHyper::default(), vec![9, 4, 2], 12).unwrap();

    let mut tape = Tape::new();
    let l = model.loss(&mut tape, &images, &labels, &cfg).unwrap();
    tape.backward(l).unwrap();

    let ids: Vec<_> = model.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    let mut worst: f64 = 0.0;
    for id in ids {
        let analytic = tape
            .param_grad(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape()));
        for i in 0..model.store.value(id).numel() {
            let orig = model.store.value(id).data()[i];
            model.store.get_mut(id).value.data_mut()[i] = orig + FD_STEP;
            let plus = loss_value(&model, &images, &labels, &cfg);
            model.store.get_mut(id).value.data_mut()[i] = orig - FD_STEP;
            let minus = loss_value(&model, &images, &labels, &cfg);
            model.store.get_mut(id).value.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], fd));
        }
    }
    worst
}

/// Brute-force AP: mean over positives of precision at that positive's rank,
/// with ties broken by ascending index.
pub fn brute_force_ap(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i] == 1).collect();
    if positives.is_empty() {
        return None;
    }
    let ranked_before = |i: usize, j: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut total = 0.0;
    for &i in &positives {
        let rank = 1 + (0..scores.len()).filter(|&j| ranked_before(i, j)).count();
        let hits = 1 + positives.iter().filter(|&&j| ranked_before(i, j)).count();
        total += hits as f64 / rank as f64;
    }
    Some(total / positives.len() as f64)
}
