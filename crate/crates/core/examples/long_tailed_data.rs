//! Synthetic long-tailed multi-label data: class profile, stratification,
//! class-aware sampling and the on-disk format.

use capn::data::{self, read_dataset, stratify, write_dataset, ClassAwareSampler, GenerateConfig, Group};
use capn::rng;

fn main() -> capn::Result<()> {
    println!("targets C=4, ratio 50, n1=100: {:?}", data::target_profile(4, 100.0, 50.0));
    let mut cfg = GenerateConfig::new(20, 600, 50.0, 5.0, 0);
    cfg.image_size = 16;
    let ds = data::generate(&cfg)?;
    println!("class counts: {:?}", ds.class_counts);
    let strat = stratify(&ds.class_counts, 100, 20)?;
    for g in [Group::Head, Group::Medium, Group::Tail] {
        println!("{g:?}: {:?}", strat.members(g));
    }
    let labels_per_sample = ds.class_counts.iter().sum::<usize>() as f64 / ds.len() as f64;
    println!("mean labels per image: {labels_per_sample:.2}");

    let sampler = ClassAwareSampler::new(&ds.labels)?;
    let mut r = rng::stream(0, "demo", 0);
    let mut hits = vec![0usize; ds.classes()];
    for i in sampler.batch(20_000, &mut r) {
        for (c, h) in hits.iter_mut().enumerate() {
            *h += usize::from(ds.labels.get(i, c));
        }
    }
    println!("positives per class over 20000 class-aware draws: {hits:?}");

    let path = std::env::temp_dir().join("capn_demo.ltml");
    write_dataset(&path, &ds)?;
    let back = read_dataset(&path)?;
    println!("round trip through {}: identical = {}", path.display(), back.images == ds.images && back.labels == ds.labels);
    Ok(())
}
