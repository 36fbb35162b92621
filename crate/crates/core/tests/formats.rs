mod common;

use capn::checkpoint;
use capn::config::RunConfig;
use capn::data::{self, manifest_path, read_dataset, write_dataset, GenerateConfig, World};
use capn::encoder::TuneMode;
use capn::model::{CapnModel, ModelInputs};
use capn::prompts::{EmbeddingsFile, TextEncoderSpec};
use capn::trainer::{train, TrainConfig};
use capn::Error;

fn small_dataset(seed: u64) -> data::Dataset {
    let mut g = GenerateConfig::new(4, 32, 4.0, 5.0, seed);
    g.image_size = 8;
    data::generate(&g).unwrap()
}

#[test]
fn dataset_file_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ltml");
    let ds = small_dataset(2);
    write_dataset(&path, &ds).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"LTML");
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    assert_eq!(u32_at(4), 1);
    assert_eq!([u32_at(8), u32_at(12), u32_at(16), u32_at(20)], [32, 8, 8, 4]);
    assert_eq!(bytes.len(), 24 + 32 * 4 + 32 * 8 * 8 * 3 * 4);
    assert_eq!(&bytes[24..24 + 128], ds.labels.as_bytes());

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(manifest_path(&path)).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
    assert_eq!(manifest["imbalance_ratio"], 4.0);
    let counts: Vec<usize> = serde_json::from_value(manifest["class_counts"].clone()).unwrap();
    assert_eq!(counts, ds.class_counts);

    let back = read_dataset(&path).unwrap();
    assert_eq!(back.images, ds.images);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.class_counts, ds.class_counts);
}

#[test]
fn corrupt_dataset_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ltml");
    write_dataset(&path, &small_dataset(0)).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
    bytes[0] = b'L';
    bytes.truncate(bytes.len() - 5);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_dataset(&path), Err(Error::Format(_))));
}

#[test]
fn embeddings_file_drives_the_text_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.json");
    let emb = World::new(4, 8, 1).class_embeddings(8, 1);
    emb.save(&path).unwrap();
    assert_eq!(EmbeddingsFile::load(&path).unwrap(), emb);

    let mut cfg = common::tiny_model_config(8);
    cfg.text_encoder = TextEncoderSpec::File {
        path: path.display().to_string(),
    };
    let inputs = ModelInputs::resolve(&cfg, None).unwrap();
    let model = CapnModel::new(cfg.clone(), 4, inputs, 0).unwrap();
    let a = model.adjacency();
    assert_eq!(a.shape(), &[4, 4]);

    cfg.embed_dim = 6;
    assert!(matches!(CapnModel::new(cfg.clone(), 4, ModelInputs::resolve(&cfg, None).unwrap(), 0), Err(Error::Config(_))));
}

#[test]
fn trained_checkpoint_round_trips_and_predicts_identically() {
    let ds = small_dataset(5);
    let mut cfg = RunConfig::default();
    cfg.model = common::tiny_model_config(8);
    cfg.train = TrainConfig {
        epochs: 2,
        batch_size: 8,
        mode: TuneMode::Peft,
        ..TrainConfig::default()
    };
    let mut model = CapnModel::new(cfg.model.clone(), 4, ModelInputs::default(), 0).unwrap();
    let state = train(&mut model, &ds, &cfg.train, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    let manifest = checkpoint::save(&path, &model, &cfg, state.step, &ds.class_counts).unwrap();
    assert_eq!(manifest.mode, TuneMode::Peft);
    assert_eq!(manifest.step, 8);
    let (back, _) = checkpoint::load(&path).unwrap();
    // trained values are stored as f32
    assert_eq!(back.store.frozen_hash(), model.store.frozen_hash());
    let p0 = model.predict_probs(&ds.images).unwrap();
    let p1 = back.predict_probs(&ds.images).unwrap();
    let worst = p0.data().iter().zip(p1.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");
    assert_eq!(back.store.trainable_count(), model.store.trainable_count());
}

#[test]
fn run_config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.model.correlation.s = 0.5;
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
    std::fs::write(&path, "{\"model\": {\"correlation\": {\"s\": 2.0}}}").unwrap();
    assert!(matches!(RunConfig::load(&path).unwrap().validate(), Err(Error::Config(_))));
}
