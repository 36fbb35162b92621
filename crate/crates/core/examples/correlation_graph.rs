//! Text-prior correlation matrix under different `s` and `τ′`, plus the
//! conditional-probability alternative built from labels.

use capn::correlation::{build_conditional, build_text_prior};
use capn::data::{self, GenerateConfig, World};

fn show(name: &str, a: &capn::diffcore::Tensor) {
    println!("{name}");
    for r in 0..a.rows() {
        let row: Vec<String> = a.row(r).iter().map(|v| format!("{v:.3}")).collect();
        println!("  {}", row.join(" "));
    }
}

fn main() -> capn::Result<()> {
    let classes = 6;
    let emb = World::new(classes, 16, 3).class_embeddings(16, 3);
    let z = emb.table()?.row_l2_normalize()?.transpose()?;
    for (s, tau) in [(0.0, 0.3), (0.3, 0.3), (0.3, 0.1), (0.9, 0.7)] {
        let g = build_text_prior(&z, s, tau)?;
        show(&format!("text prior, s = {s}, tau' = {tau}"), &g.adjacency);
    }
    let mut cfg = GenerateConfig::new(classes, 300, 10.0, 5.0, 3);
    cfg.image_size = 16;
    let ds = data::generate(&cfg)?;
    let g = build_conditional(&ds.labels, 0.4, 0.3, 0.3)?;
    show("conditional probability, threshold 0.4", &g.adjacency);
    Ok(())
}
