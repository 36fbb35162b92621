mod common;

use std::path::Path;
use std::process::{Command, Output};

use capn::checkpoint;
use capn::cli::parse_probs_csv;
use capn::config::RunConfig;
use capn::data::{read_dataset, stratify};
use capn::metrics::stratified_map;

fn capn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_capn")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.model = common::tiny_model_config(8);
    cfg.train.epochs = 1;
    cfg.train.batch_size = 16;
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn gen(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let path = dir.join(name);
    let mut args = vec!["gen-data", "--out", s(&path), "--classes", "4", "--samples", "40", "--image-size", "8"];
    if !extra.contains(&"--imbalance") {
        args.extend(["--imbalance", "5"]);
    }
    args.extend_from_slice(extra);
    ok(&capn(&args));
    path
}

#[test]
fn gen_data_is_deterministic_and_prints_summary() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.ltml");
    let b = dir.path().join("b.ltml");
    let args = |p: &Path| vec!["gen-data".to_string(), "--out".into(), s(p).into(), "--classes".into(), "4".into(), "--samples".into(), "136".into(), "--imbalance".into(), "50".into()];
    let out = ok(&capn(&args(&a).iter().map(String::as_str).collect::<Vec<_>>()));
    ok(&capn(&args(&b).iter().map(String::as_str).collect::<Vec<_>>()));
    assert!(out.contains("class_counts"));
    assert!(out.contains("head="));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("ltml.json")).unwrap(),
        std::fs::read(b.with_extension("ltml.json")).unwrap()
    );
}

#[test]
fn usage_and_validation_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = capn(&["gen-data", "--out", s(&dir.path().join("x")), "--classes", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(capn(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(capn(&["train"]).status.code(), Some(2));
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |_| {});
    let out = capn(&["train", "--config", s(&cfg), "--data", s(&dir.path().join("nope.ltml")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn epochs_zero_checkpoint_equals_init() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.ltml", &[]);
    let cfg = write_config(dir.path(), |c| c.train.epochs = 0);
    let out = dir.path().join("run");
    ok(&capn(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    assert_eq!(std::fs::read_to_string(out.join("loss.csv")).unwrap(), "step,epoch,loss\n");
    let (model, manifest) = checkpoint::load(out.join("checkpoint.json")).unwrap();
    let run = RunConfig::load(&cfg).unwrap();
    let ds = read_dataset(&data).unwrap();
    let init = capn::cli::train_model(&run, &ds).unwrap().0;
    assert_eq!(manifest.step, 0);
    for (id, p) in init.store.iter() {
        assert_eq!(&p.value, model.store.value(id), "{}", p.name);
    }
}

#[test]
fn peft_train_records_frozen_hash_and_eval_outputs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.ltml", &["--seed", "3"]);
    let cfg = write_config(dir.path(), |_| {});
    let out = dir.path().join("run");
    let printed = ok(&capn(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out), "--mode", "peft"]));
    let manifest = checkpoint::read_manifest(out.join("checkpoint.json")).unwrap();
    assert!(printed.contains(&manifest.frozen_hash));
    assert_eq!(manifest.frozen_hash.len(), 64);
    let resolved = RunConfig::load(out.join("config.json")).unwrap();
    assert_eq!(resolved.train.mode, capn::encoder::TuneMode::Peft);

    let probs_path = dir.path().join("probs.csv");
    let json = ok(&capn(&[
        "eval",
        "--checkpoint",
        s(&out.join("checkpoint.json")),
        "--data",
        s(&data),
        "--report",
        "json",
        "--dump-probs",
        s(&probs_path),
    ]));
    let report: serde_json::Value = serde_json::from_str(&json).unwrap();
    let probs = parse_probs_csv(&std::fs::read_to_string(&probs_path).unwrap()).unwrap();
    let ds = read_dataset(&data).unwrap();
    let strat = stratify(&manifest.class_counts, 100, 20).unwrap();
    let again = stratified_map(&probs, &ds.labels, &strat).unwrap();
    assert!((again.total_map - report["total_map"].as_f64().unwrap()).abs() <= 1e-12);

    let table = ok(&capn(&["eval", "--checkpoint", s(&out.join("checkpoint.json")), "--data", s(&data), "--report", "table"]));
    for col in ["Total", "Head", "Medium", "Tail"] {
        assert!(table.contains(col), "{table}");
    }
}

#[test]
fn eval_rejects_patch_multiple_and_class_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "d.ltml", &[]);
    let cfg = write_config(dir.path(), |c| c.train.epochs = 0);
    let out = dir.path().join("run");
    ok(&capn(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    let ckpt = out.join("checkpoint.json");
    let bad = capn(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--tte", "on", "--tte-e", "8"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("must not be a multiple of the ViT patch size"));

    let other = dir.path().join("five.ltml");
    ok(&capn(&["gen-data", "--out", s(&other), "--classes", "5", "--samples", "40", "--image-size", "8", "--imbalance", "5"]));
    let mismatch = capn(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other)]);
    assert_eq!(mismatch.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("C = 4"));
}

#[test]
fn export_corr_writes_row_stochastic_matrix() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |_| {});
    let out = dir.path().join("a.json");
    ok(&capn(&["export-corr", "--config", s(&cfg), "--out", s(&out), "--classes", "5"]));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let rows = v["matrix"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let sum: f64 = r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }
    let cond = write_config(dir.path(), |c| c.model.correlation.source = capn::correlation::CorrelationSource::ConditionalProb);
    assert_eq!(capn(&["export-corr", "--config", s(&cond), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn ablate_grid_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.ltml", &["--seed", "1"]);
    let test = gen(dir.path(), "test.ltml", &["--seed", "1", "--split", "test", "--imbalance", "1"]);
    let cfg = write_config(dir.path(), |_| {});
    let run = || ok(&capn(&["ablate", "--config", s(&cfg), "--data", s(&train), "--test-data", s(&test), "--grid", "s=0,0.3"]));
    let first = run();
    assert_eq!(first, run());
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "s,total,head,medium,tail");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("0.3,"));
    let empty = capn(&["ablate", "--config", s(&cfg), "--data", s(&train), "--test-data", s(&test), "--grid", "s="]);
    assert_eq!(empty.status.code(), Some(2));
}

#[test]
fn ablate_bottleneck_sweep_completes() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.ltml", &[]);
    let cfg = write_config(dir.path(), |c| {
        c.model.vit.width = 72;
        c.model.vit.heads = 2;
        c.train.epochs = 0;
    });
    let csv = ok(&capn(&["ablate", "--config", s(&cfg), "--data", s(&train), "--test-data", s(&train), "--grid", "dhat=2,4,16,32,64"]));
    assert_eq!(csv.lines().count(), 6);
}
