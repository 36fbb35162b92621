//! One PASS/FAIL line per acceptance criterion. Runs without the libtest
//! harness so every criterion reports even when an earlier one fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use capn::cli;
use capn::config::RunConfig;
use capn::correlation::build_text_prior;
use capn::data::{self, stratify, write_dataset, GenerateConfig, Labels};
use capn::diffcore::{sigmoid, Tape, Tensor};
use capn::encoder::TuneMode;
use capn::experiment::{self, DeskConfig};
use capn::loss::{db_focal_loss_value, LossConfig, LossHyper};
use capn::metrics::{average_precision, stratified_map};
use capn::model::{CapnModel, ModelInputs};
use capn::trainer::{SamplerKind, TrainConfig, Trainer};
use capn::tte::{crop_origins, ensemble_predict, Scorer, TteConfig};

use common::{brute_force_ap, model_gradcheck, tiny_model_config};

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

fn run(n: usize, name: &str, budget: Duration, f: fn() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = std::panic::catch_unwind(f).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    let el = t0.elapsed();
    let ok = out.ok && el < budget;
    println!(
        "criterion {n} {name}: {} ({:.2}s of {}s) {}",
        if ok { "PASS" } else { "FAIL" },
        el.as_secs_f64(),
        budget.as_secs(),
        out.detail
    );
    ok
}

fn c1_gradcheck() -> Outcome {
    let worst = (0..10).map(model_gradcheck).fold(0.0f64, f64::max);
    outcome(worst < 1e-4, format!("worst relative error {worst:.2e} over 10 seeds"))
}

fn c2_correlation() -> Outcome {
    let mut worst_row: f64 = 0.0;
    let mut min_entry = f64::INFINITY;
    let mut worst_perm: f64 = 0.0;
    let (c, d) = (7, 5);
    for seed in 0..20u64 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        // class embeddings as rows, transposed into the d × C layout
        let rows = Tensor::new(vec![c, d], (0..c * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| rows.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (z, pz) = (rows.transpose().unwrap(), permuted.transpose().unwrap());
        for si in 0..10 {
            for ti in 1..=7 {
                let (s, tau) = (si as f64 / 10.0, ti as f64 / 10.0);
                let a = build_text_prior(&z, s, tau).unwrap().adjacency;
                let pa = build_text_prior(&pz, s, tau).unwrap().adjacency;
                for i in 0..c {
                    worst_row = worst_row.max((a.row(i).iter().sum::<f64>() - 1.0).abs());
                    for j in 0..c {
                        min_entry = min_entry.min(a.get(i, j));
                        worst_perm = worst_perm.max((pa.get(i, j) - a.get(perm[i], perm[j])).abs());
                    }
                }
            }
        }
    }
    outcome(
        worst_row <= 1e-9 && min_entry >= 0.0 && worst_perm <= 1e-12,
        format!("row-sum error {worst_row:.1e}, min entry {min_entry:.1e}, permutation error {worst_perm:.1e}"),
    )
}

fn bce_oracle(z: &Tensor, y: &Tensor, gamma: f64) -> f64 {
    let mut total = 0.0;
    for (&zi, &yi) in z.data().iter().zip(y.data()) {
        let p = sigmoid(zi);
        // log σ(z) = −softplus(−z), log(1 − σ(z)) = −softplus(z)
        let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        total += if yi == 1.0 {
            (1.0 - p).powf(gamma) * sp(-zi)
        } else {
            p.powf(gamma) * sp(zi)
        };
    }
    total / z.rows() as f64
}

fn c3_loss() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for k in 0..100 {
        let (b, c) = (r.random_range(1..9), r.random_range(1..8));
        let z = Tensor::new(vec![b, c], (0..b * c).map(|_| r.random_range(-12.0..12.0)).collect()).unwrap();
        let y = Tensor::new(vec![b, c], (0..b * c).map(|_| f64::from(r.random_bool(0.4) as u8)).collect()).unwrap();
        let counts: Vec<usize> = (0..c).map(|_| r.random_range(1..=50)).collect();
        let gamma = if k % 2 == 0 { 0.0 } else { r.random_range(0.5..3.0) };
        let cfg = LossConfig::new(LossHyper::focal(gamma), counts, 50).unwrap();
        let got = db_focal_loss_value(&z, &y, &cfg).unwrap();
        worst = worst.max((got - bce_oracle(&z, &y, gamma)).abs());
    }
    let n = 600;
    let counts_cfg = |nc: usize| LossConfig::new(LossHyper::default(), vec![nc], n).unwrap();
    let weights: Vec<f64> = (1..=n).map(|nc| counts_cfg(nc).rebalanced_weight(0).unwrap()).collect();
    let monotone = weights.windows(2).all(|w| w[1] < w[0]);
    outcome(
        worst <= 1e-9 && monotone,
        format!("max |loss − oracle| {worst:.1e}; r_c strictly decreasing in n_c over 1..={n}: {monotone}"),
    )
}

fn c4_map() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut map_err: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(1..40);
        let levels = r.random_range(2..6);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..levels)) / 4.0).collect();
        let labels: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
        match (average_precision(&scores, &labels), brute_force_ap(&scores, &labels)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => worst = f64::INFINITY,
        }
    }
    // total mAP equals the mean of brute-force per-class APs
    let rows: Vec<Vec<u8>> = (0..30).map(|i| (0..4).map(|c| u8::from((i + c) % 3 == 0)).collect()).collect();
    let labels = Labels::from_rows(&rows).unwrap();
    let probs = Tensor::new(vec![30, 4], (0..120).map(|_| f64::from(r.random_range(0..5))).collect()).unwrap();
    let strat = stratify(&labels.column_counts(), 100, 20).unwrap();
    let rep = stratified_map(&probs, &labels, &strat).unwrap();
    let per: Vec<f64> = (0..4)
        .filter_map(|c| {
            let col: Vec<f64> = (0..30).map(|i| probs.get(i, c)).collect();
            let lab: Vec<u8> = (0..30).map(|i| rows[i][c]).collect();
            brute_force_ap(&col, &lab)
        })
        .collect();
    map_err = map_err.max((rep.total_map - per.iter().sum::<f64>() / per.len() as f64).abs());
    outcome(
        worst <= 1e-12 && map_err <= 1e-12,
        format!("max AP error {worst:.1e}, mAP error {map_err:.1e}"),
    )
}

struct ConstantScorer(Vec<f64>);

impl Scorer for ConstantScorer {
    fn logits(&self, batch: &Tensor) -> capn::Result<Tensor> {
        let b = batch.shape()[0];
        Tensor::new(vec![b, self.0.len()], (0..b).flat_map(|_| self.0.iter().copied()).collect())
    }
}

/// Logits are per-channel means of the top-left quadrant, so crops disagree.
struct QuadrantScorer;

impl Scorer for QuadrantScorer {
    fn logits(&self, batch: &Tensor) -> capn::Result<Tensor> {
        let s = batch.shape();
        let (b, side) = (s[0], s[1]);
        let half = side / 2;
        let mut out = Vec::with_capacity(b * 3);
        for k in 0..b {
            for ch in 0..3 {
                let mut acc = 0.0;
                for i in 0..half {
                    for j in 0..half {
                        acc += batch.data()[((k * side + i) * side + j) * 3 + ch];
                    }
                }
                out.push(acc / (half * half) as f64);
            }
        }
        Tensor::new(vec![b, 3], out)
    }
}

fn c5_tte() -> Outcome {
    let origins = crop_origins(24);
    let want = [(12, 12), (0, 0), (0, 24), (24, 0), (24, 24)];
    let origins_ok = origins == want;
    let cfg = TteConfig {
        e: 24,
        base_size: 224,
        patch_size: 16,
        ..TteConfig::default()
    };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let img = Tensor::new(vec![224, 224, 3], (0..224 * 224 * 3).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let logits = vec![-1.5, 0.0, 2.25];
    let p = ensemble_predict(&ConstantScorer(logits.clone()), &img, &cfg).unwrap();
    let const_err = p.data().iter().zip(&logits).map(|(a, &z)| (a - sigmoid(z)).abs()).fold(0.0, f64::max);

    let small = TteConfig {
        e: 6,
        base_size: 32,
        patch_size: 4,
        ..TteConfig::default()
    };
    let img = Tensor::new(vec![32, 32, 3], (0..32 * 32 * 3).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let pstar = ensemble_predict(&QuadrantScorer, &img, &small).unwrap();
    let big = capn::tte::resize(&img, 38).unwrap();
    let crops = capn::tte::five_crops(&big, 32, 6).unwrap();
    let mut bounds_ok = true;
    for c in 0..3 {
        let per: Vec<f64> = crops
            .iter()
            .map(|cr| QuadrantScorer.probabilities(&cr.reshape(&[1, 32, 32, 3]).unwrap()).unwrap().data()[c])
            .collect();
        let lo = per.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = per.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        bounds_ok &= lo - 1e-15 <= pstar.data()[c] && pstar.data()[c] <= hi + 1e-15;
    }
    let rejects = [16usize, 32, 48]
        .iter()
        .all(|&e| TteConfig { e, ..cfg.clone() }.validate().is_err());
    outcome(
        origins_ok && const_err <= 1e-15 && bounds_ok && rejects,
        format!("origins {origins_ok}, constant-model error {const_err:.1e}, min/max bounds {bounds_ok}, patch-multiple rejected {rejects}"),
    )
}

fn c6_peft() -> Outcome {
    let mut g = GenerateConfig::new(4, 40, 4.0, 5.0, 6);
    g.image_size = 8;
    let ds = data::generate(&g).unwrap();
    let mcfg = tiny_model_config(8);
    let mut model = CapnModel::new(mcfg.clone(), 4, ModelInputs::default(), 6).unwrap();
    let mask = model.set_mode(TuneMode::Peft).unwrap();
    let count_ok = mask.trainable_count(&model.store) == model.vit.peft_trainable_formula()
        && model.vit.peft_trainable_formula()
            == mcfg.vit.depth * (2 * mcfg.vit.width * mcfg.vit.adapter_dim + 1) + mcfg.vit.width * mcfg.embed_dim;
    let before = model.store.frozen_hash();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 8,
        mode: TuneMode::Peft,
        sampler: SamplerKind::ClassAware,
        ..TrainConfig::default()
    };
    let mut hash_ok = true;
    {
        let mut t = Trainer::new(&mut model, &ds, cfg, 6).unwrap();
        for _ in 0..200 {
            t.step().unwrap();
            hash_ok &= t.model.store.frozen_hash() == before;
        }
    }

    // adapter degenerate identities against the same encoder with adapters off
    let imgs = capn::rng::normal(&mut capn::rng::stream(6, "imgs", 0), &[3, 8, 8, 3], 1.0);
    let mut plain = model.clone();
    for b in &mut plain.vit.blocks {
        b.adapter.enabled = false;
    }
    let encode = |m: &CapnModel| {
        let mut tape = Tape::no_grad();
        let v = m.vit.forward(&mut tape, &m.store, &imgs).unwrap();
        tape.value(v).clone()
    };
    let diff = |a: &Tensor, b: &Tensor| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let reference = encode(&plain);
    let active = diff(&encode(&model), &reference);
    let mut zero_scale = model.clone();
    let mut zero_up = model.clone();
    for b in model.vit.blocks.clone() {
        zero_scale.store.set_value(b.adapter.scale, Tensor::scalar(0.0)).unwrap();
        let shape = zero_up.store.value(b.adapter.up).shape().to_vec();
        zero_up.store.set_value(b.adapter.up, Tensor::zeros(&shape)).unwrap();
    }
    let e_scale = diff(&encode(&zero_scale), &reference);
    let e_up = diff(&encode(&zero_up), &reference);
    outcome(
        count_ok && hash_ok && active > 0.0 && e_scale <= 1e-12 && e_up <= 1e-12,
        format!(
            "trainable count matches {count_ok}, frozen hash constant over 200 steps {hash_ok}, s=0 error {e_scale:.1e}, W_up=0 error {e_up:.1e}, trained adapter effect {active:.1e}"
        ),
    )
}

/// Headline numbers of one seed, as frozen in the golden file.
#[derive(Debug, PartialEq, serde::Serialize, serde::Deserialize)]
struct DeskGolden {
    seed: u64,
    capn_total: f64,
    capn_tail: f64,
    capn_tte_total: f64,
    bce_tail: f64,
    no_gcn_total: f64,
}

const GOLDEN_TOL: f64 = 1e-9;

fn golden_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/desk_experiment.json")
}

/// Compares against the frozen values, or rewrites them when
/// `CAPN_BLESS_GOLDENS` is set.
fn check_goldens(got: &[DeskGolden]) -> Result<(), String> {
    let path = golden_path();
    if std::env::var_os("CAPN_BLESS_GOLDENS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, serde_json::to_string_pretty(got).unwrap() + "\n").map_err(|e| e.to_string())?;
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let want: Vec<DeskGolden> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    if want.len() != got.len() {
        return Err(format!("golden has {} seeds, run has {}", want.len(), got.len()));
    }
    for (w, g) in want.iter().zip(got) {
        let pairs = [
            (w.capn_total, g.capn_total),
            (w.capn_tail, g.capn_tail),
            (w.capn_tte_total, g.capn_tte_total),
            (w.bce_tail, g.bce_tail),
            (w.no_gcn_total, g.no_gcn_total),
        ];
        if w.seed != g.seed || pairs.iter().any(|(a, b)| (a - b).abs() > GOLDEN_TOL) {
            return Err(format!("seed {} drifted from golden: want {w:?}, got {g:?}", g.seed));
        }
    }
    Ok(())
}

fn c7_experiment() -> Outcome {
    let cfg = DeskConfig::default();
    let mut lines = Vec::new();
    let mut goldens = Vec::new();
    let (mut tail, mut gcn, mut tte_up, mut tte_safe) = (true, 0, 0, true);
    for seed in 0..3 {
        let o = experiment::run_seed(&cfg, seed).unwrap();
        tail &= o.tail_gain();
        gcn += usize::from(o.gcn_gain());
        tte_up += usize::from(o.tte_delta() > 0.0);
        tte_safe &= o.tte_delta() >= -0.5;
        lines.push(format!(
            "seed {seed}: tail capn {:.4} vs bce {:.4}; total capn {:.4} vs no-gcn {:.4}; tte {:+.2} pts",
            o.capn.tail_map.unwrap_or(f64::NAN),
            o.bce.tail_map.unwrap_or(f64::NAN),
            o.capn.total_map,
            o.no_gcn.total_map,
            o.tte_delta()
        ));
        goldens.push(DeskGolden {
            seed,
            capn_total: o.capn.total_map,
            capn_tail: o.capn.tail_map.unwrap_or(f64::NAN),
            capn_tte_total: o.capn_tte.total_map,
            bce_tail: o.bce.tail_map.unwrap_or(f64::NAN),
            no_gcn_total: o.no_gcn.total_map,
        });
    }
    let golden = check_goldens(&goldens);
    let ok = tail && gcn >= 2 && tte_up >= 2 && tte_safe && golden.is_ok();
    outcome(
        ok,
        format!(
            "(a) tail gain every seed {tail}; (b) gcn gain {gcn}/3; (c) tte gain {tte_up}/3, no drop over 0.5 {tte_safe}; goldens {}\n    {}",
            golden.err().unwrap_or_else(|| "match".into()),
            lines.join("\n    ")
        ),
    )
}

fn train_and_eval(dir: &std::path::Path, data: &std::path::Path, config: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let out = dir.join("run");
    cli::cmd_train(&cli::TrainArgs {
        config: Some(config.to_path_buf()),
        data: data.to_path_buf(),
        out: out.clone(),
        mode: None,
        sampler: None,
        seed: None,
        epochs: None,
    })
    .unwrap();
    let report = cli::cmd_eval(&cli::EvalArgs {
        checkpoint: out.join("checkpoint.json"),
        data: data.to_path_buf(),
        tte: cli::OnOff::On,
        tte_e: Some(2),
        report: cli::ReportFormat::Json,
        dump_probs: Some(out.join("probs.csv")),
    })
    .unwrap();
    let mut files = vec![("report".to_string(), report.into_bytes())];
    for name in ["checkpoint.json", "checkpoint.bin", "loss.csv", "config.json", "probs.csv"] {
        files.push((name.to_string(), std::fs::read(out.join(name)).unwrap()));
    }
    files
}

fn c8_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut g = GenerateConfig::new(4, 48, 5.0, 5.0, 8);
    g.image_size = 8;
    let data = tmp.path().join("train.ltml");
    write_dataset(&data, &data::generate(&g).unwrap()).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 8;
    cfg.model = tiny_model_config(8);
    cfg.train.epochs = 2;
    cfg.train.batch_size = 16;
    cfg.train.augment_e = 2;
    let config = tmp.path().join("config.json");
    std::fs::write(&config, cfg.to_json().unwrap()).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = train_and_eval(a.path(), &data, &config);
    let second = train_and_eval(b.path(), &data, &config);
    let differing: Vec<&str> = first
        .iter()
        .zip(&second)
        .filter(|(x, y)| x.1 != y.1)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        differing.is_empty(),
        format!("{} outputs compared, differing: {differing:?}", first.len()),
    )
}

fn main() {
    let s = Duration::from_secs;
    let results = [
        run(1, "full-model gradient check", s(60), c1_gradcheck),
        run(2, "correlation invariants", s(10), c2_correlation),
        run(3, "loss reduction identities", s(5), c3_loss),
        run(4, "mAP against brute force", s(5), c4_map),
        run(5, "TTE contract", s(1), c5_tte),
        run(6, "PEFT audit", s(60), c6_peft),
        run(7, "desk-scale directional experiment", s(600), c7_experiment),
        run(8, "CLI determinism", s(60), c8_determinism),
    ];
    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
