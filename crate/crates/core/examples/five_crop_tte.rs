//! Five-crop geometry and probability averaging.

use capn::diffcore::Tensor;
use capn::tte::{crop_origins, ensemble_predict, Scorer, TteConfig};

/// Scores each image by the mean of its top-left quadrant.
struct Quadrant;

impl Scorer for Quadrant {
    fn logits(&self, batch: &Tensor) -> capn::Result<Tensor> {
        let (b, side) = (batch.shape()[0], batch.shape()[1]);
        let h = side / 2;
        let per = side * side * 3;
        let out = (0..b)
            .map(|k| {
                let img = &batch.data()[k * per..(k + 1) * per];
                (0..h).flat_map(|i| (0..h).map(move |j| (i, j))).map(|(i, j)| img[(i * side + j) * 3]).sum::<f64>() / (h * h) as f64
            })
            .collect();
        Tensor::new(vec![b, 1], out)
    }
}

fn main() -> capn::Result<()> {
    println!("origins at S = 224, e = 24: {:?}", crop_origins(24));
    for e in [4, 6, 8] {
        let cfg = TteConfig { e, base_size: 32, patch_size: 4, ..TteConfig::default() };
        match cfg.validate() {
            Ok(()) => println!("e = {e}: ok"),
            Err(err) => println!("e = {e}: {err}"),
        }
    }
    // a horizontal ramp, so each crop sees a different quadrant mean
    let side = 32;
    let data = (0..side * side * 3).map(|i| ((i / 3) % side) as f64 / side as f64 - 0.5).collect();
    let img = Tensor::new(vec![side, side, 3], data)?;
    let cfg = TteConfig { e: 6, base_size: 32, patch_size: 4, ..TteConfig::default() };
    let single = Quadrant.probabilities(&img.reshape(&[1, side, side, 3])?)?;
    let p = ensemble_predict(&Quadrant, &img, &cfg)?;
    println!("single view p = {:.6}, five-crop p* = {:.6}", single.data()[0], p.data()[0]);
    Ok(())
}
