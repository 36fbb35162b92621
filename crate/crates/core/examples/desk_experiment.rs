//! The desk-scale directional experiment over three seeds: CAPN against
//! BCE with uniform sampling, against no GCN, and with five-crop TTE.

use capn::experiment::{run_seed, DeskConfig};

fn main() -> capn::Result<()> {
    let cfg = DeskConfig::default();
    println!("{}", serde_json::to_string(&cfg).expect("config serializes"));
    for seed in 0..3 {
        let o = run_seed(&cfg, seed)?;
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        println!(
            "seed {seed}: capn total {} tail {} | bce total {} tail {} | no-gcn total {} | capn+tte total {}",
            pct(Some(o.capn.total_map)),
            pct(o.capn.tail_map),
            pct(Some(o.bce.total_map)),
            pct(o.bce.tail_map),
            pct(Some(o.no_gcn.total_map)),
            pct(Some(o.capn_tte.total_map)),
        );
    }
    Ok(())
}
