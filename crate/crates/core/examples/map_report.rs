//! Average precision with the stable tie rule and a stratified report.

use capn::data::{stratify, Labels};
use capn::diffcore::Tensor;
use capn::metrics::{average_precision, stratified_map};

fn main() -> capn::Result<()> {
    println!("AP([0.9, 0.8, 0.1], [1, 0, 1]) = {:.6}", average_precision(&[0.9, 0.8, 0.1], &[1, 0, 1]).unwrap_or(f64::NAN));
    println!("AP with a tie, positive first   = {:.6}", average_precision(&[0.5, 0.5], &[1, 0]).unwrap_or(f64::NAN));
    println!("AP with a tie, positive second  = {:.6}", average_precision(&[0.5, 0.5], &[0, 1]).unwrap_or(f64::NAN));

    let labels = Labels::from_rows(&[
        vec![1, 0, 0],
        vec![1, 1, 0],
        vec![0, 1, 1],
        vec![1, 0, 0],
        vec![0, 0, 1],
    ])?;
    let probs = Tensor::from_rows(&[
        vec![0.9, 0.2, 0.1],
        vec![0.7, 0.6, 0.3],
        vec![0.2, 0.4, 0.8],
        vec![0.6, 0.5, 0.2],
        vec![0.1, 0.3, 0.4],
    ])?;
    let strat = stratify(&[150, 50, 10], 100, 20)?;
    let report = stratified_map(&probs, &labels, &strat)?;
    print!("{}", report.to_table());
    println!("{}", report.to_json()?);
    Ok(())
}
