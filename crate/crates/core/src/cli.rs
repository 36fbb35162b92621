//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage and validation failures, 3 for
//! runtime and data errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::correlation::{AdjacencyExport, CorrelationSource};
use crate::data::{self, read_dataset, stratify, write_dataset, Dataset, GenerateConfig, Group, Split, World};
use crate::diffcore::Tensor;
use crate::encoder::TuneMode;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::model::{CapnModel, ModelInputs};
use crate::prompts::PromptInit;
use crate::trainer::{self, SamplerKind, Trainer};

#[derive(Debug, Parser)]
#[command(name = "capn", version, about = "Long-tailed multi-label recognition at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic long-tailed multi-label dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Write the correlation adjacency as JSON.
    ExportCorr(ExportArgs),
    /// Train and evaluate over a grid of knob values.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Full,
    Peft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Uniform,
    ClassAware,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 600)]
    pub samples: usize,
    #[arg(long, default_value_t = 50.0)]
    pub imbalance: f64,
    #[arg(long, default_value_t = 5.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Train)]
    pub split: SplitArg,
    /// Largest per-instance pattern displacement in pixels.
    #[arg(long, default_value_t = 1)]
    pub jitter: usize,
    /// Also write class embeddings that follow the planted label semantics.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub embedding_dim: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub sampler: Option<SamplerArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    pub tte: OnOff,
    #[arg(long)]
    pub tte_e: Option<usize>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub report: ReportFormat,
    #[arg(long)]
    pub dump_probs: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Training data; required for the conditional-probability source.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of classes when no dataset is given.
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub test_data: PathBuf,
    /// `knob=v1,v2,…`; knobs: s, tau, dhat, m, corr, init, gcn, sampler. Repeat for a product grid.
    #[arg(long, required = true)]
    pub grid: Vec<String>,
    /// CSV output; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        _ => 3,
    }
}

pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::ExportCorr(a) => cmd_export_corr(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

/// Parses arguments, runs the command and maps errors to exit codes.
pub fn main_entry() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn strat_summary(counts: &[usize], head_min: usize, tail_max: usize) -> Result<String> {
    let s = stratify(counts, head_min, tail_max)?;
    Ok(format!(
        "head={} medium={} tail={}",
        s.members(Group::Head).len(),
        s.members(Group::Medium).len(),
        s.members(Group::Tail).len()
    ))
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<String> {
    let cfg = GenerateConfig {
        classes: a.classes,
        samples: a.samples,
        imbalance_ratio: a.imbalance,
        snr: a.snr,
        seed: a.seed,
        image_size: a.image_size,
        split: match a.split {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        },
        jitter: a.jitter,
    };
    let ds = data::generate(&cfg)?;
    write_dataset(&a.out, &ds)?;
    if let Some(path) = &a.embeddings {
        World::new(a.classes, a.image_size, a.seed)
            .class_embeddings(a.embedding_dim, a.seed)
            .save(path)?;
    }
    let mut out = String::new();
    let _ = writeln!(out, "class_counts {:?}", ds.class_counts);
    let _ = writeln!(out, "{}", strat_summary(&ds.class_counts, 100, 20)?);
    Ok(out)
}

fn check_image_size(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    let (h, w) = ds.image_size();
    let side = cfg.model.vit.image_size;
    if h != side || w != side {
        return Err(Error::Config(format!(
            "dataset images are {h}×{w} but model.vit.image_size = {side}"
        )));
    }
    Ok(())
}

fn build_model(cfg: &RunConfig, ds: &Dataset) -> Result<CapnModel> {
    let inputs = ModelInputs::resolve(&cfg.model, Some(&ds.labels))?;
    CapnModel::new(cfg.model.clone(), ds.classes(), inputs, cfg.seed)
}

/// Trains on `ds` and returns the model and its loss history.
pub fn train_model(cfg: &RunConfig, ds: &Dataset) -> Result<(CapnModel, Vec<trainer::LossRecord>)> {
    cfg.validate()?;
    check_image_size(cfg, ds)?;
    let mut model = build_model(cfg, ds)?;
    let mut t = Trainer::new(&mut model, ds, cfg.train.clone(), cfg.seed)?;
    t.run()?;
    let history = t.state.history.clone();
    Ok((model, history))
}

pub fn loss_csv(history: &[trainer::LossRecord]) -> String {
    let mut s = String::from("step,epoch,loss\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.step, r.epoch, r.loss);
    }
    s
}

pub fn cmd_train(a: &TrainArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(m) = a.mode {
        cfg.train.mode = match m {
            ModeArg::Full => TuneMode::Full,
            ModeArg::Peft => TuneMode::Peft,
        };
    }
    if let Some(s) = a.sampler {
        cfg.train.sampler = match s {
            SamplerArg::Uniform => SamplerKind::Uniform,
            SamplerArg::ClassAware => SamplerKind::ClassAware,
        };
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    cfg.validate()?;
    let ds = read_dataset(&a.data)?;
    let (model, history) = train_model(&cfg, &ds)?;
    std::fs::create_dir_all(&a.out)?;
    let manifest = checkpoint::save(a.out.join("checkpoint.json"), &model, &cfg, history.len(), &ds.class_counts)?;
    std::fs::write(a.out.join("loss.csv"), loss_csv(&history))?;
    std::fs::write(a.out.join("config.json"), cfg.to_json()?)?;
    let mut out = String::new();
    let _ = writeln!(out, "steps {}", history.len());
    if let Some(last) = history.last() {
        let _ = writeln!(out, "final_loss {}", last.loss);
    }
    let _ = writeln!(out, "trainable_params {}", manifest.trainable_params);
    let _ = writeln!(out, "frozen_hash {}", manifest.frozen_hash);
    Ok(out)
}

pub fn probs_csv(probs: &Tensor) -> String {
    let mut s = String::from("sample");
    for c in 0..probs.cols() {
        let _ = write!(s, ",c{c}");
    }
    s.push('\n');
    for r in 0..probs.rows() {
        let _ = write!(s, "{r}");
        for &v in probs.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// Parses a probability dump written by `eval --dump-probs`.
pub fn parse_probs_csv(text: &str) -> Result<Tensor> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let row: std::result::Result<Vec<f64>, _> = line.split(',').skip(1).map(str::parse).collect();
        rows.push(row.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?);
    }
    Tensor::from_rows(&rows)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let manifest = checkpoint::read_manifest(&a.checkpoint)?;
    let mut cfg = manifest.config.clone();
    cfg.tte.enabled = a.tte == OnOff::On;
    if let Some(e) = a.tte_e {
        cfg.tte.e = e;
    }
    cfg.validate()?;
    let ds = read_dataset(&a.data)?;
    if ds.classes() != manifest.classes {
        return Err(Error::Compatibility(format!(
            "checkpoint has C = {} but the dataset has C = {}",
            manifest.classes,
            ds.classes()
        )));
    }
    check_image_size(&cfg, &ds)?;
    let (model, manifest) = checkpoint::load(&a.checkpoint)?;
    let strat = stratify(&manifest.class_counts, cfg.strat.head_min, cfg.strat.tail_max)?;
    let tte = cfg.tte.enabled.then(|| cfg.tte_config());
    let (report, probs) = trainer::evaluate(&model, &ds, &strat, tte.as_ref())?;
    if let Some(path) = &a.dump_probs {
        std::fs::write(path, probs_csv(&probs))?;
    }
    render(&report, a.report)
}

fn render(report: &EvalReport, fmt: ReportFormat) -> Result<String> {
    match fmt {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Table => Ok(report.to_table()),
    }
}

pub fn cmd_export_corr(a: &ExportArgs) -> Result<String> {
    let cfg = load_config(a.config.as_deref())?;
    cfg.validate()?;
    let ds = a.data.as_ref().map(read_dataset).transpose()?;
    let classes = match (&ds, a.classes) {
        (Some(d), _) => d.classes(),
        (None, Some(c)) => c,
        (None, None) => cfg.data.classes,
    };
    if cfg.model.correlation.source == CorrelationSource::ConditionalProb && ds.is_none() {
        return Err(Error::Config("the conditional_prob source needs --data".into()));
    }
    let inputs = ModelInputs::resolve(&cfg.model, ds.as_ref().map(|d| &d.labels))?;
    let model = CapnModel::new(cfg.model.clone(), classes, inputs, cfg.seed)?;
    let export = AdjacencyExport::from(&model.graph);
    std::fs::write(&a.out, serde_json::to_string_pretty(&export)? + "\n")?;
    Ok(format!("wrote {}×{} adjacency to {}\n", classes, classes, a.out.display()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub knob: String,
    pub values: Vec<String>,
}

pub fn parse_grid(specs: &[String]) -> Result<Vec<GridAxis>> {
    if specs.is_empty() {
        return Err(Error::param("ablation grid is empty"));
    }
    specs
        .iter()
        .map(|s| {
            let (knob, values) = s
                .split_once('=')
                .ok_or_else(|| Error::param(format!("grid entry {s:?} is not knob=v1,v2")))?;
            let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
            if values.is_empty() {
                return Err(Error::param(format!("grid knob {knob} has no values")));
            }
            Ok(GridAxis {
                knob: knob.trim().to_string(),
                values,
            })
        })
        .collect()
}

fn parse_value<T: std::str::FromStr>(knob: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::param(format!("bad value {v:?} for knob {knob}")))
}

pub fn apply_knob(cfg: &mut RunConfig, knob: &str, v: &str) -> Result<()> {
    match knob {
        "s" => cfg.model.correlation.s = parse_value(knob, v)?,
        "tau" => cfg.model.correlation.tau_prime = parse_value(knob, v)?,
        "dhat" => cfg.model.vit.adapter_dim = parse_value(knob, v)?,
        "m" => cfg.model.prompt_length = parse_value(knob, v)?,
        "gcn" => cfg.model.use_gcn = parse_value(knob, v)?,
        "corr" => {
            cfg.model.correlation.source = match v {
                "text_prior" => CorrelationSource::TextPrior,
                "conditional_prob" => CorrelationSource::ConditionalProb,
                _ => return Err(Error::param(format!("bad value {v:?} for knob corr"))),
            }
        }
        "init" => {
            cfg.model.prompt_init = match v {
                "template" => PromptInit::Template,
                "random" => PromptInit::Random,
                _ => return Err(Error::param(format!("bad value {v:?} for knob init"))),
            }
        }
        "sampler" => {
            cfg.train.sampler = match v {
                "uniform" => SamplerKind::Uniform,
                "class_aware" => SamplerKind::ClassAware,
                _ => return Err(Error::param(format!("bad value {v:?} for knob sampler"))),
            }
        }
        _ => return Err(Error::param(format!("unknown ablation knob {knob}"))),
    }
    Ok(())
}

/// Cartesian product of the grid, first axis slowest.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<String>> {
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(v.clone());
                    q
                })
            })
            .collect();
    }
    points
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn ablate(base: &RunConfig, train: &Dataset, test: &Dataset, axes: &[GridAxis]) -> Result<String> {
    let points = grid_points(axes);
    let configs: Vec<RunConfig> = points
        .iter()
        .map(|p| {
            let mut c = base.clone();
            for (axis, v) in axes.iter().zip(p) {
                apply_knob(&mut c, &axis.knob, v)?;
            }
            c.validate()?;
            Ok(c)
        })
        .collect::<Result<_>>()?;
    let mut csv = axes.iter().map(|a| a.knob.as_str()).collect::<Vec<_>>().join(",");
    csv.push_str(",total,head,medium,tail\n");
    for (p, cfg) in points.iter().zip(&configs) {
        let (model, _) = train_model(cfg, train)?;
        let strat = stratify(&train.class_counts, cfg.strat.head_min, cfg.strat.tail_max)?;
        let tte = cfg.tte.enabled.then(|| cfg.tte_config());
        let (r, _) = trainer::evaluate(&model, test, &strat, tte.as_ref())?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            p.join(","),
            r.total_map,
            opt_cell(r.head_map),
            opt_cell(r.medium_map),
            opt_cell(r.tail_map)
        );
    }
    Ok(csv)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<String> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    let axes = parse_grid(&a.grid)?;
    cfg.validate()?;
    let train = read_dataset(&a.data)?;
    let test = read_dataset(&a.test_data)?;
    let csv = ablate(&cfg, &train, &test, &axes)?;
    match &a.out {
        Some(path) => {
            std::fs::write(path, &csv)?;
            Ok(format!("wrote {} rows to {}\n", csv.lines().count() - 1, path.display()))
        }
        None => Ok(csv),
    }
}
