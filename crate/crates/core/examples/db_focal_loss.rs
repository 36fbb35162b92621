//! Re-balanced weights, class biases and the loss under its BCE and focal
//! reductions.

use capn::diffcore::Tensor;
use capn::loss::{db_focal_loss_value, LossConfig, LossHyper};

fn main() -> capn::Result<()> {
    let counts = vec![400, 120, 30, 8];
    let cfg = LossConfig::new(LossHyper::default(), counts.clone(), 500)?;
    println!("class  n_c   r_c      v_c");
    for (c, n) in counts.iter().enumerate() {
        println!("{c:>5} {n:>4} {:.5} {:+.5}", cfg.rebalanced_weight(c)?, cfg.class_bias(c)?);
    }

    let z = Tensor::from_rows(&[vec![3.0, -1.0, 0.5, -4.0], vec![-2.0, 2.5, -0.5, 1.0]])?;
    let y = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]])?;
    for (name, hyper) in [
        ("bce", LossHyper::bce()),
        ("focal γ=2", LossHyper::focal(2.0)),
        ("db-focal", LossHyper::default()),
    ] {
        let cfg = LossConfig::new(hyper, counts.clone(), 500)?;
        println!("{name:>10}: {:.6}", db_focal_loss_value(&z, &y, &cfg)?);
    }
    Ok(())
}
