//! End-to-end: generate data, train CAPN in full and PEFT modes, evaluate
//! with and without test-time ensembling, save and reload a checkpoint.

use capn::checkpoint;
use capn::config::RunConfig;
use capn::data::{stratify, Split};
use capn::encoder::{TuneMode, VitConfig};
use capn::model::{CapnModel, ModelInputs};
use capn::trainer::{evaluate, Trainer};

fn main() -> capn::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.classes = 10;
    cfg.data.samples = 300;
    cfg.data.test_samples = 200;
    cfg.data.imbalance_ratio = 20.0;
    cfg.data.image_size = 16;
    cfg.model.vit = VitConfig {
        image_size: 16,
        width: 32,
        heads: 2,
        depth: 1,
        adapter_dim: 8,
        ..VitConfig::default()
    };
    cfg.train.epochs = 6;
    cfg.train.lr_backbone = 2e-3;
    cfg.train.lr_gcn = 4e-3;
    cfg.tte.e = 2;
    cfg.validate()?;

    let train = capn::data::generate(&cfg.data.generate_config(Split::Train, 0))?;
    let test = capn::data::generate(&cfg.data.generate_config(Split::Test, 0))?;
    let strat = stratify(&train.class_counts, 60, 12)?;

    for mode in [TuneMode::Full, TuneMode::Peft] {
        cfg.train.mode = mode;
        let inputs = ModelInputs::resolve(&cfg.model, Some(&train.labels))?;
        let mut model = CapnModel::new(cfg.model.clone(), train.classes(), inputs, cfg.seed)?;
        let mut t = Trainer::new(&mut model, &train, cfg.train.clone(), cfg.seed)?;
        let losses = t.run()?;
        println!("{mode:?}: epoch losses {:?}", losses.iter().map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>());
        println!("  trainable parameters {}", model.store.trainable_count());
        let (plain, _) = evaluate(&model, &test, &strat, None)?;
        let (tte, _) = evaluate(&model, &test, &strat, Some(&cfg.tte_config()))?;
        print!("  without TTE\n{}", plain.to_table());
        print!("  with TTE\n{}", tte.to_table());

        let path = std::env::temp_dir().join(format!("capn_{mode:?}.json"));
        checkpoint::save(&path, &model, &cfg, losses.len(), &train.class_counts)?;
        let (back, manifest) = checkpoint::load(&path)?;
        let (again, _) = evaluate(&back, &test, &strat, None)?;
        println!("  reloaded checkpoint (step {}): total mAP {:.4}", manifest.step, again.total_map);
    }
    Ok(())
}
