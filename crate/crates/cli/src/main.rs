//! `ddsm` command line front end.
//!
//! Each command reads an optional TOML config, applies flag overrides and
//! writes the resolved config next to its outputs. Exit codes: 0 success,
//! 2 configuration error, 3 numerical failure, 4 I/O failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ddsm::cnn::{self, Cnn, CnnConfig};
use ddsm::container::{
    load_dataset, load_predictions, sha256_hex, write_dataset, write_predictions, Dataset, Manifest,
};
use ddsm::dsm::{index_field_classic, NumericProbing};
use ddsm::experiment::{run_experiment, sensitivity_records, ExperimentConfig};
use ddsm::fnn::{self, Fnn, FnnConfig, GaussianKind};
use ddsm::metrics::EvalReport;
use ddsm::nn::{gradcheck, ParameterStore};
use ddsm::pipeline::{blocked_center_pair, center_inclusion_study, generate_records, Background, DatasetConfig, NoiseSpec, SensitivityRow, TrainingRecord};
use ddsm::render::render_heatmap;
use ddsm::train::{Monitor, TrainOptions};
use ddsm::{CartesianGrid, Domain, Error, ErrorKind, IndexField, SolverConfig, SquareDomain};

const RUN_CONFIG: &str = "config.toml";
const MODEL_FILE: &str = "model.eitp";
const LAYER_TOLERANCE: f64 = 1e-5;
const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "ddsm", version, about = "Direct and deep direct sampling for EIT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset of conductivities, Cauchy data and index functions.
    GenData(GenData),
    /// Train the pointwise residual network.
    TrainFnn(TrainFnn),
    /// Train the convolutional encoder-decoder.
    TrainCnn(TrainCnn),
    /// Classic index functions for every record of a dataset.
    Dsm(Dsm),
    /// Predict index functions with a trained model.
    Predict(Predict),
    /// Score a prediction directory against dataset truths.
    Eval(Eval),
    /// Render an index field (or a dataset truth) as a PNG heat map.
    Render(Render),
    /// Finite-difference checks of every layer and of toy models.
    Gradcheck(Gradcheck),
    /// Centre-inclusion study: boundary differences and reconstructions.
    SensitivityStudy(Sensitivity),
    /// Full dataset, training and evaluation protocol from one config.
    Run(Run),
}

#[derive(Args)]
struct GenData {
    /// Dataset config (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    scenario: Option<u32>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    /// Nodes per side.
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    first_index: Option<usize>,
}

#[derive(Args)]
struct TrainCommon {
    #[arg(long)]
    data: PathBuf,
    /// Network config (TOML); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_samples: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Print the running loss every this many iterations.
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct TrainFnn {
    #[command(flatten)]
    common: TrainCommon,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    batch_points: Option<usize>,
}

#[derive(Args)]
struct TrainCnn {
    #[command(flatten)]
    common: TrainCommon,
    /// Encoder widths, e.g. `8,16,32`.
    #[arg(long, value_delimiter = ',')]
    channels: Option<Vec<usize>>,
}

#[derive(Args)]
struct TestNoise {
    /// Relative noise level added to the test data.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0x5eed)]
    noise_seed: u64,
}

#[derive(Args)]
struct Dsm {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Current pattern used as the single Cauchy pair.
    #[arg(long, default_value_t = 1)]
    omega: u32,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[command(flatten)]
    noise: TestNoise,
}

#[derive(Args)]
struct Predict {
    /// Directory written by train-fnn or train-cnn.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    noise: TestNoise,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report file to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    label: Option<String>,
}

#[derive(Args)]
struct Render {
    /// An `EITI` field file.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    field: Option<PathBuf>,
    /// Dataset directory; renders the truth of `--sample`.
    #[arg(long, requires = "sample")]
    data: Option<PathBuf>,
    /// Position of the record within the dataset.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Pixels per node.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Layers,
    Fnn,
    Cnn,
    All,
}

#[derive(Args)]
struct Gradcheck {
    #[arg(long, value_enum, default_value_t = Target::All)]
    target: Target,
    #[arg(long, default_value_t = 5)]
    seed: u64,
    /// Optional TOML report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Sensitivity {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 10)]
    patterns: u32,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    /// Directories written by train-fnn / train-cnn; both configurations are
    /// reconstructed with every model given.
    #[arg(long)]
    model: Vec<PathBuf>,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Resolved config written by the training commands and read by `predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainRun {
    method: String,
    seed: u64,
    dataset_digest: String,
    iterations_run: usize,
    final_loss: f64,
    model_sha256: String,
    fnn: Option<FnnConfig>,
    cnn: Option<CnnConfig>,
}

enum Failure {
    Lib(Error),
    /// A check ran to completion and failed its tolerance.
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

fn config_err(msg: impl std::fmt::Display) -> Failure {
    Failure::Lib(Error::Config(msg.to_string()))
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let text = toml::to_string(value).map_err(config_err)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn solver_for(cfg: &DatasetConfig) -> SolverConfig {
    SolverConfig::with_tolerance(cfg.tolerance)
}

/// Dataset records, with test noise applied when requested.
fn noisy_records(data: &Dataset, noise: &TestNoise) -> Result<Vec<TrainingRecord>, Failure> {
    if noise.noise == 0.0 {
        return Ok(data.records.clone());
    }
    let cfg = &data.manifest.config;
    let bg = Background::new(&cfg.grid()?, 1.0, cfg.pairs as u32, &solver_for(cfg))?;
    let spec = NoiseSpec::new(noise.noise, noise.noise_seed);
    Ok(data.records.iter().enumerate().map(|(k, r)| bg.with_noise(r, &spec, cfg.first_index + k)).collect::<ddsm::Result<_>>()?)
}

fn gen_data(a: GenData) -> Outcome {
    let mut cfg = match &a.config {
        Some(p) => read_toml(p)?,
        None => DatasetConfig::desk(1, 100, 10, 2024),
    };
    set(&mut cfg.scenario, a.scenario);
    set(&mut cfg.samples, a.samples);
    set(&mut cfg.pairs, a.pairs);
    set(&mut cfg.master_seed, a.seed);
    set(&mut cfg.first_index, a.first_index);
    if let Some(n) = a.grid {
        (cfg.n1, cfg.n2) = (n, n);
    }
    cfg.validate()?;
    write_toml(&a.out.join(RUN_CONFIG), &cfg)?;
    let records = generate_records(&cfg)?;
    let m = write_dataset(&cfg, &records, &a.out)?;
    println!("wrote {} records to {} (digest {})", m.records.len(), a.out.display(), m.digest());
    Ok(())
}

fn apply_common(c: &TrainCommon, pairs: &mut usize, iterations: &mut usize, lr: &mut f64, momentum: &mut Option<f64>, batch: &mut usize) {
    set(pairs, c.pairs);
    set(iterations, c.iterations);
    set(lr, c.learning_rate);
    if c.momentum.is_some() {
        *momentum = c.momentum;
    }
    set(batch, c.batch_samples);
}

fn options<'a, M: 'a>(c: &TrainCommon, loss_of: impl Fn(&M) -> String + 'a) -> TrainOptions<'a, M> {
    TrainOptions {
        checkpoint_every: c.checkpoint_every,
        checkpoint_dir: c.checkpoint_every.map(|_| c.out.join("checkpoints")),
        monitor: c.log_every.map(|every| Monitor {
            every,
            callback: Box::new(move |it, m: &M| {
                println!("iteration {it}: {}", loss_of(m));
                Ok(false)
            }),
        }),
    }
}

fn finish_training(c: &TrainCommon, data: &Manifest, store: &ParameterStore, losses: &[f64], run: TrainRun) -> Outcome {
    let bytes = store.to_bytes();
    std::fs::create_dir_all(&c.out)?;
    std::fs::write(c.out.join(MODEL_FILE), &bytes)?;
    let run = TrainRun {
        dataset_digest: data.digest(),
        iterations_run: losses.len(),
        final_loss: losses.last().copied().unwrap_or(f64::NAN),
        model_sha256: sha256_hex(&bytes),
        ..run
    };
    write_toml(&c.out.join(RUN_CONFIG), &run)?;
    let text: String = losses.iter().enumerate().map(|(k, l)| format!("{},{l:e}\n", k + 1)).collect();
    std::fs::write(c.out.join("losses.csv"), format!("iteration,loss\n{text}"))?;
    println!("{} iterations, final loss {:.6}, model {}", run.iterations_run, run.final_loss, run.model_sha256);
    Ok(())
}

fn blank_run(method: &str, seed: u64) -> TrainRun {
    TrainRun { method: method.into(), seed, dataset_digest: String::new(), iterations_run: 0, final_loss: f64::NAN, model_sha256: String::new(), fnn: None, cnn: None }
}

fn train_fnn(a: TrainFnn) -> Outcome {
    let c = &a.common;
    let mut cfg: FnnConfig = match &c.config {
        Some(p) => read_toml(p)?,
        None => FnnConfig::default(),
    };
    apply_common(c, &mut cfg.pairs, &mut cfg.iterations, &mut cfg.learning_rate, &mut cfg.momentum, &mut cfg.batch_samples);
    set(&mut cfg.width, a.width);
    set(&mut cfg.blocks, a.blocks);
    set(&mut cfg.batch_points, a.batch_points);
    cfg.validate()?;
    let data = load_dataset(&c.data)?;
    let records = data.records.iter().map(|r| r.truncated(cfg.pairs)).collect::<ddsm::Result<Vec<_>>>()?;
    let mut opts = options(c, |m: &Fnn| format!("pooled accuracy {:.4}", fnn::pooled_accuracy(m, &records[..records.len().min(4)]).unwrap_or(f64::NAN)));
    let (model, report) = fnn::train(&records, &cfg, c.seed, &mut opts)?;
    finish_training(c, &data.manifest, &model.store, &report.losses, TrainRun { fnn: Some(cfg), ..blank_run("fnn", c.seed) })
}

fn train_cnn(a: TrainCnn) -> Outcome {
    let c = &a.common;
    let mut cfg: CnnConfig = match &c.config {
        Some(p) => read_toml(p)?,
        None => CnnConfig::default(),
    };
    apply_common(c, &mut cfg.pairs, &mut cfg.iterations, &mut cfg.learning_rate, &mut cfg.momentum, &mut cfg.batch_samples);
    set(&mut cfg.channels, a.channels);
    cfg.validate()?;
    let data = load_dataset(&c.data)?;
    cfg.check_grid(&data.manifest.config.grid()?).map_err(config_err)?;
    let records = data.records.iter().map(|r| r.truncated(cfg.pairs)).collect::<ddsm::Result<Vec<_>>>()?;
    let mut opts = options(c, |_: &Cnn| "running".to_string());
    let (model, report) = cnn::train(&records, &cfg, c.seed, &mut opts)?;
    finish_training(c, &data.manifest, &model.store, &report.losses, TrainRun { cnn: Some(cfg), ..blank_run("cnn", c.seed) })
}

enum Model {
    Fnn(Fnn),
    Cnn(Cnn),
}

impl Model {
    fn load(dir: &Path) -> Result<(TrainRun, Model), Failure> {
        let run: TrainRun = read_toml(&dir.join(RUN_CONFIG))?;
        let store = ParameterStore::load(&dir.join(MODEL_FILE))?;
        let model = match (run.method.as_str(), &run.fnn, &run.cnn) {
            ("fnn", Some(cfg), _) => Model::Fnn(Fnn::from_store(cfg, store)?),
            ("cnn", _, Some(cfg)) => Model::Cnn(Cnn::from_store(cfg, store)?),
            _ => return Err(config_err(format!("{}: unknown method {:?} or missing network table", dir.display(), run.method))),
        };
        Ok((run, model))
    }

    fn pairs(&self) -> usize {
        match self {
            Model::Fnn(m) => m.config.pairs,
            Model::Cnn(m) => m.config.pairs,
        }
    }

    fn predict(&self, record: &TrainingRecord) -> ddsm::Result<IndexField> {
        let r = record.truncated(self.pairs())?;
        match self {
            Model::Fnn(m) => fnn::predict_field(m, &r),
            Model::Cnn(m) => cnn::predict_field(m, &r),
        }
    }
}

#[derive(Serialize)]
struct PredictRun<'a> {
    method: &'a str,
    model: String,
    model_sha256: &'a str,
    data: String,
    noise: f64,
    noise_seed: u64,
}

fn predict(a: Predict) -> Outcome {
    let (run, model) = Model::load(&a.model)?;
    let data = load_dataset(&a.data)?;
    if data.manifest.config.pairs < model.pairs() {
        return Err(config_err(format!("model needs {} pairs, dataset has {}", model.pairs(), data.manifest.config.pairs)));
    }
    let records = noisy_records(&data, &a.noise)?;
    let preds = records
        .iter()
        .enumerate()
        .map(|(k, r)| model.predict(r).map_err(|e| Error::Record { sample: data.manifest.config.first_index + k, source: Box::new(e) }))
        .collect::<ddsm::Result<Vec<_>>>()?;
    let set = write_predictions(&a.out, &run.method, &data.manifest, &preds)?;
    let resolved = PredictRun {
        method: &run.method,
        model: a.model.display().to_string(),
        model_sha256: &run.model_sha256,
        data: a.data.display().to_string(),
        noise: a.noise.noise,
        noise_seed: a.noise.noise_seed,
    };
    write_toml(&a.out.join(RUN_CONFIG), &resolved)?;
    println!("wrote {} predictions (digest {})", set.records.len(), set.digest());
    Ok(())
}

#[derive(Serialize)]
struct DsmRun {
    data: String,
    omega: u32,
    gamma: f64,
    noise: f64,
    noise_seed: u64,
}

fn dsm(a: Dsm) -> Outcome {
    let data = load_dataset(&a.data)?;
    let cfg = &data.manifest.config;
    let k = a.omega as usize;
    if k == 0 || k > cfg.pairs {
        return Err(config_err(format!("omega must lie in 1..={}", cfg.pairs)));
    }
    let solver = solver_for(cfg);
    let domain: Arc<dyn Domain> = Arc::new(SquareDomain::new(&cfg.grid()?));
    let probing = NumericProbing::new(domain.clone(), &solver)?;
    let records = noisy_records(&data, &a.noise)?;
    let fields = records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let p = &r.pairs[k - 1];
            index_field_classic(domain.as_ref(), &p.f, &p.g, 1.0, a.gamma, &probing, &solver)
                .map(|c| c.field)
                .map_err(|e| Error::Record { sample: cfg.first_index + i, source: Box::new(e) })
        })
        .collect::<ddsm::Result<Vec<_>>>()?;
    let set = write_predictions(&a.out, "classic", &data.manifest, &fields)?;
    let resolved = DsmRun { data: a.data.display().to_string(), omega: a.omega, gamma: a.gamma, noise: a.noise.noise, noise_seed: a.noise.noise_seed };
    write_toml(&a.out.join(RUN_CONFIG), &resolved)?;
    println!("wrote {} index fields (digest {})", set.records.len(), set.digest());
    Ok(())
}

fn eval(a: Eval) -> Outcome {
    let data = load_dataset(&a.data)?;
    let (set, preds) = load_predictions(&a.predictions)?;
    if set.dataset_digest != data.manifest.digest() {
        return Err(config_err("predictions were made for a different dataset"));
    }
    let digest = sha256_hex(format!("{}{}", set.digest(), data.manifest.digest()).as_bytes());
    let pairs: Vec<(IndexField, IndexField)> = preds.into_iter().zip(data.records.iter().map(|r| r.truth.clone())).collect();
    let label = a.label.unwrap_or_else(|| set.method.clone());
    let report = EvalReport::evaluate(&label, &digest, &pairs)?;
    if let Some(dir) = a.out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, report.to_toml()?)?;
    println!(
        "{label}: IoU {:.4} ± {:.4}, Dice {:.4}, accuracy {:.4}, MSE {:.5}",
        report.iou.mean, report.iou.std, report.dice.mean, report.accuracy.mean, report.mse.mean
    );
    Ok(())
}

fn render(a: Render) -> Outcome {
    let field = match (&a.field, &a.data) {
        (Some(p), _) => ddsm::container::decode_index_field(&std::fs::read(p)?)?,
        (None, Some(d)) => {
            let k = a.sample.unwrap_or(0);
            let data = load_dataset(d)?;
            data.records.get(k).ok_or_else(|| config_err(format!("dataset has {} records", data.records.len())))?.truth.clone()
        }
        (None, None) => return Err(config_err("give --field or --data")),
    };
    render_heatmap(&field, a.scale, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct GradRow {
    name: String,
    max_relative_error: f64,
    tolerance: f64,
}

fn gradcheck_cmd(a: Gradcheck) -> Outcome {
    let mut rows = Vec::new();
    if matches!(a.target, Target::Layers | Target::All) {
        for (name, e) in gradcheck::layer_suite(a.seed)? {
            rows.push(GradRow { name: format!("layer {name}"), max_relative_error: e, tolerance: LAYER_TOLERANCE });
        }
    }
    if matches!(a.target, Target::Fnn | Target::All) {
        for (kind, name) in [(GaussianKind::Elementwise, "fnn elementwise"), (GaussianKind::Radial, "fnn radial")] {
            let r = fnn::toy_gradient_check(kind, a.seed)?;
            rows.push(GradRow { name: name.into(), max_relative_error: r.max_relative_error, tolerance: MODEL_TOLERANCE });
        }
    }
    if matches!(a.target, Target::Cnn | Target::All) {
        let r = cnn::toy_gradient_check(a.seed)?;
        rows.push(GradRow { name: "cnn".into(), max_relative_error: r.max_relative_error, tolerance: MODEL_TOLERANCE });
    }
    for r in &rows {
        let verdict = if r.max_relative_error <= r.tolerance { "ok" } else { "FAIL" };
        println!("{:<28} {:.3e}  (≤ {:.0e}) {verdict}", r.name, r.max_relative_error, r.tolerance);
    }
    if let Some(p) = &a.out {
        #[derive(Serialize)]
        struct Report<'a> {
            seed: u64,
            rows: &'a [GradRow],
        }
        write_toml(p, &Report { seed: a.seed, rows: &rows })?;
    }
    match rows.iter().find(|r| r.max_relative_error.is_nan() || r.max_relative_error > r.tolerance) {
        Some(r) => Err(Failure::Check(format!("{} exceeds its tolerance", r.name))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct Reconstruction {
    model: String,
    method: String,
    with_center: String,
    without_center: String,
    center_value_with: f64,
    center_value_without: f64,
}

#[derive(Serialize)]
struct StudyReport {
    grid: usize,
    patterns: u32,
    tolerance: f64,
    rows: Vec<SensitivityRow>,
    reconstructions: Vec<Reconstruction>,
}

fn sensitivity(a: Sensitivity) -> Outcome {
    let grid = CartesianGrid::square(a.grid)?;
    let solver = SolverConfig::with_tolerance(a.tolerance);
    solver.validate()?;
    let (with, without) = blocked_center_pair();
    let rows = center_inclusion_study(&grid, &with, &without, a.patterns, &solver)?;
    for r in &rows {
        println!("omega {:>2}: relative difference {:.4}", r.omega, r.relative_difference);
    }
    std::fs::create_dir_all(&a.out)?;
    let centre = grid.index(a.grid / 2, a.grid / 2);
    let mut reconstructions = Vec::new();
    let [r1, r2] = sensitivity_records(&grid, a.patterns as usize, &solver)?;
    render_heatmap(&r1.truth, 4, &a.out.join("truth_with_center.png"))?;
    render_heatmap(&r2.truth, 4, &a.out.join("truth_without_center.png"))?;
    for (k, dir) in a.model.iter().enumerate() {
        let (run, model) = Model::load(dir)?;
        if model.pairs() > a.patterns as usize {
            return Err(config_err(format!("{} needs {} patterns", dir.display(), model.pairs())));
        }
        let (p1, p2) = (model.predict(&r1)?, model.predict(&r2)?);
        let (f1, f2) = (format!("model{k}_{}_with_center.png", run.method), format!("model{k}_{}_without_center.png", run.method));
        render_heatmap(&p1, 4, &a.out.join(&f1))?;
        render_heatmap(&p2, 4, &a.out.join(&f2))?;
        reconstructions.push(Reconstruction {
            model: dir.display().to_string(),
            method: run.method,
            with_center: f1,
            without_center: f2,
            center_value_with: p1.values[centre],
            center_value_without: p2.values[centre],
        });
    }
    write_toml(&a.out.join("study.toml"), &StudyReport { grid: a.grid, patterns: a.patterns, tolerance: a.tolerance, rows, reconstructions })?;
    Ok(())
}

fn run(a: Run) -> Outcome {
    let text = std::fs::read_to_string(&a.config)?;
    let cfg = ExperimentConfig::from_toml(&text)?;
    let report = run_experiment(&cfg, &a.out, &mut |line: &str| println!("{line}"))?;
    println!("report digest {}", report.digest()?);
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainFnn(a) => train_fnn(a),
        Command::TrainCnn(a) => train_cnn(a),
        Command::Dsm(a) => dsm(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::SensitivityStudy(a) => sensitivity(a),
        Command::Run(a) => run(a),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}
