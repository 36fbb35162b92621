//! Five-crop test-time ensembling.
//!
//! The input is enlarged by `e` pixels, cropped at the centre and the four
//! corners, and the per-crop outputs are averaged. `e` must not be a
//! multiple of the patch size, otherwise the corner crops would see the same
//! patch grid alignment.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Tensor};
use crate::error::{Error, Result};

pub const N_AUG: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Probabilities,
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TteConfig {
    pub e: usize,
    pub base_size: usize,
    pub patch_size: usize,
    pub average: Averaging,
}

impl Default for TteConfig {
    fn default() -> Self {
        Self {
            e: 6,
            base_size: 32,
            patch_size: 4,
            average: Averaging::Probabilities,
        }
    }
}

impl TteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.e < 1 {
            return Err(Error::Config("tte.e must be at least 1".into()));
        }
        if !self.e.is_multiple_of(2) {
            return Err(Error::Config(format!("tte.e = {} must be even so the centre crop is integral", self.e)));
        }
        if self.patch_size > 0 && self.e.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "tte.e = {} is a multiple of the patch size {}: e must not be a multiple of the ViT patch size",
                self.e, self.patch_size
            )));
        }
        if self.base_size < 1 {
            return Err(Error::Config("tte.base_size must be at least 1".into()));
        }
        Ok(())
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[h, w, 3] => Ok((h, w)),
        s => Err(Error::dim("tte image", s, &[0, 0, 3])),
    }
}

/// Bilinear resize with corner-aligned sampling.
pub fn resize(image: &Tensor, side: usize) -> Result<Tensor> {
    if side < 1 {
        return Err(Error::param("resize side must be at least 1"));
    }
    let (h, w) = dims(image)?;
    if (h, w) == (side, side) {
        return Ok(image.clone());
    }
    let coord = |i: usize, n: usize| {
        if side == 1 || n == 1 {
            0.0
        } else {
            i as f64 * (n - 1) as f64 / (side - 1) as f64
        }
    };
    let src = image.data();
    let mut out = Vec::with_capacity(side * side * 3);
    for i in 0..side {
        let y = coord(i, h);
        let (y0, fy) = (y.floor() as usize, y - y.floor());
        let y1 = (y0 + 1).min(h - 1);
        for j in 0..side {
            let x = coord(j, w);
            let (x0, fx) = (x.floor() as usize, x - x.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..3 {
                let at = |r: usize, c: usize| src[(r * w + c) * 3 + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new(vec![side, side, 3], out)
}

pub fn crop(image: &Tensor, row: usize, col: usize, size: usize) -> Result<Tensor> {
    let (h, w) = dims(image)?;
    if row + size > h || col + size > w || size == 0 {
        return Err(Error::dim("crop", &[h, w], &[row + size, col + size]));
    }
    let mut out = Vec::with_capacity(size * size * 3);
    for r in row..row + size {
        let start = (r * w + col) * 3;
        out.extend_from_slice(&image.data()[start..start + size * 3]);
    }
    Tensor::new(vec![size, size, 3], out)
}

/// Centre, top-left, top-right, bottom-left, bottom-right, as `(row, col)`.
pub fn crop_origins(e: usize) -> [(usize, usize); N_AUG] {
    [(e / 2, e / 2), (0, 0), (0, e), (e, 0), (e, e)]
}

pub fn five_crops(image: &Tensor, size: usize, e: usize) -> Result<Vec<Tensor>> {
    let (h, w) = dims(image)?;
    if h != size + e || w != size + e {
        return Err(Error::dim("five_crops", &[h, w], &[size + e, size + e]));
    }
    crop_origins(e).iter().map(|&(r, c)| crop(image, r, c, size)).collect()
}

/// Anything that maps a `B × S × S × 3` batch to `B × C` logits.
pub trait Scorer {
    fn logits(&self, batch: &Tensor) -> Result<Tensor>;

    fn probabilities(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.logits(batch)?.map(sigmoid))
    }
}

fn stack(images: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

/// Ensembled probabilities for a batch of `B × S × S × 3` images.
pub fn ensemble_predict_batch<M: Scorer + ?Sized>(model: &M, images: &Tensor, cfg: &TteConfig) -> Result<Tensor> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 || s[1] != cfg.base_size || s[2] != cfg.base_size {
        return Err(Error::dim("ensemble_predict", s, &[0, cfg.base_size, cfg.base_size, 3]));
    }
    let per = s[1] * s[2] * s[3];
    let mut crops: Vec<Vec<Tensor>> = (0..N_AUG).map(|_| Vec::with_capacity(s[0])).collect();
    for b in 0..s[0] {
        let img = Tensor::new(s[1..].to_vec(), images.data()[b * per..(b + 1) * per].to_vec())?;
        let big = resize(&img, cfg.base_size + cfg.e)?;
        for (k, c) in five_crops(&big, cfg.base_size, cfg.e)?.into_iter().enumerate() {
            crops[k].push(c);
        }
    }
    let mut acc: Option<Tensor> = None;
    for views in &crops {
        let out = match cfg.average {
            Averaging::Probabilities => model.probabilities(&stack(views)?)?,
            Averaging::Logits => model.logits(&stack(views)?)?,
        };
        acc = Some(match acc {
            None => out,
            Some(a) => a.zip_map(&out, "ensemble_predict", |x, y| x + y)?,
        });
    }
    let mean = acc.expect("five crops").map(|v| v / N_AUG as f64);
    Ok(match cfg.average {
        Averaging::Probabilities => mean,
        Averaging::Logits => mean.map(sigmoid),
    })
}

/// `p* = (1/5)·Σ p^cr` for one `S × S × 3` image.
pub fn ensemble_predict<M: Scorer + ?Sized>(model: &M, image: &Tensor, cfg: &TteConfig) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let out = ensemble_predict_batch(model, &image.reshape(&shape)?, cfg)?;
    Tensor::new(vec![out.cols()], out.into_data())
}
