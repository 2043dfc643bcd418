//! Dataset → train → predict → evaluate, driven by one config file.
//!
//! Output directory layout:
//!
//! ```text
//! config.toml                  resolved configuration
//! data/train, data/test        EITD datasets
//! models/<method>_n<N>_s<seed>.eitp
//! predictions/<cell>.eiti      only when `save_predictions` is set
//! report.toml
//! ```

use std::borrow::Cow;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cnn::{self, CnnConfig};
use crate::container::{encode_index_field, sha256_hex, write_dataset};
use crate::dsm::{index_field_classic, NumericProbing};
use crate::error::{Error, Result};
use crate::fnn::{self, FnnConfig};
use crate::grid::{CartesianGrid, IndexField};
use crate::metrics::EvalReport;
use crate::pipeline::{blocked_center_pair, generate_records, Background, DatasetConfig, NoiseSpec, TrainingRecord};
use crate::solver::{Domain, SolverConfig, SquareDomain};
use crate::train::TrainOptions;

pub const REPORT_FILE: &str = "report.toml";
pub const CONFIG_FILE: &str = "config.toml";

/// Order of the index used for the classic baseline.
pub const CLASSIC_GAMMA: f64 = 1.0;

fn default_noise_seed() -> u64 {
    0x5eed
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Training set; its pair count bounds every entry of `pairs`.
    pub dataset: DatasetConfig,
    pub test_samples: usize,
    pub pairs: Vec<usize>,
    pub noise: Vec<f64>,
    #[serde(default = "default_noise_seed")]
    pub noise_seed: u64,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub classic_baseline: bool,
    #[serde(default)]
    pub save_predictions: bool,
    pub fnn: Option<FnnConfig>,
    pub cnn: Option<CnnConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn test_dataset(&self) -> DatasetConfig {
        DatasetConfig { samples: self.test_samples, first_index: self.dataset.first_index + self.dataset.samples, ..self.dataset.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.dataset.validate()?;
        if self.test_samples == 0 {
            return bad("test_samples must be positive".into());
        }
        if self.pairs.is_empty() || self.pairs.iter().any(|n| *n == 0 || *n > self.dataset.pairs) {
            return bad(format!("pairs must lie in 1..={}", self.dataset.pairs));
        }
        if self.noise.is_empty() || self.noise.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return bad("noise levels must be finite and non-negative".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one training seed is required".into());
        }
        if self.fnn.is_none() && self.cnn.is_none() && !self.classic_baseline {
            return bad("nothing to run: configure fnn, cnn or classic_baseline".into());
        }
        for &n in &self.pairs {
            if let Some(f) = &self.fnn {
                FnnConfig { pairs: n, ..f.clone() }.validate()?;
            }
            if let Some(c) = &self.cnn {
                let c = CnnConfig { pairs: n, ..c.clone() };
                c.validate()?;
                c.check_grid(&self.dataset.grid()?).map_err(|e| Error::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: String,
    pub pairs: usize,
    pub seed: u64,
    pub delta: f64,
    pub checkpoint: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub predictions: Option<String>,
    pub predictions_sha256: String,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub config_digest: String,
    pub train_digest: String,
    pub test_digest: String,
    pub cells: Vec<Cell>,
}

impl ExperimentReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn cells_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a Cell> + 'a {
        self.cells.iter().filter(move |c| c.method == method)
    }

    pub fn find(&self, method: &str, pairs: usize, seed: u64, delta: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.pairs == pairs && c.seed == seed && c.delta == delta)
    }
}

/// Digest over the concatenated `EITI` blobs of a prediction set.
pub fn predictions_digest(fields: &[IndexField]) -> String {
    let mut bytes = Vec::new();
    for f in fields {
        bytes.extend(encode_index_field(f));
    }
    sha256_hex(&bytes)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    digest: String,
    test: &'a [TrainingRecord],
    noisy: &'a [Vec<TrainingRecord>],
    log: &'a mut dyn FnMut(&str),
}

impl Ctx<'_> {
    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(self.out).unwrap_or(p).to_string_lossy().replace('\\', "/")
    }

    #[allow(clippy::too_many_arguments)]
    fn record_cell(&mut self, method: &str, n: usize, seed: u64, delta: f64, preds: Vec<IndexField>, truths: &[TrainingRecord], model: Option<(&Path, String, f64)>) -> Result<Cell> {
        let label = format!("{method}_n{n}_s{seed}_d{delta:.2}");
        let pairs: Vec<(IndexField, IndexField)> = preds.iter().cloned().zip(truths.iter().map(|r| r.truth.clone())).collect();
        let eval = EvalReport::evaluate(&label, &self.digest, &pairs)?;
        let predictions = if self.cfg.save_predictions {
            let dir = self.out.join("predictions");
            std::fs::create_dir_all(&dir)?;
            let mut bytes = Vec::new();
            for f in &preds {
                bytes.extend(encode_index_field(f));
            }
            let p = dir.join(format!("{label}.eiti"));
            std::fs::write(&p, bytes)?;
            Some(self.rel(&p))
        } else {
            None
        };
        (self.log)(&format!("{label}: mean IoU {:.4}", eval.iou.mean));
        Ok(Cell {
            method: method.into(),
            pairs: n,
            seed,
            delta,
            checkpoint: model.as_ref().map(|m| self.rel(m.0)),
            checkpoint_sha256: model.as_ref().map(|m| m.1.clone()),
            predictions,
            predictions_sha256: predictions_digest(&preds),
            final_loss: model.map(|m| m.2),
            eval,
        })
    }
}

/// Records restricted to their first `n` pairs; borrowed when nothing is cut.
fn truncate_all(records: &[TrainingRecord], n: usize) -> Result<Cow<'_, [TrainingRecord]>> {
    if records.iter().all(|r| r.pair_count() == n) {
        return Ok(Cow::Borrowed(records));
    }
    Ok(Cow::Owned(records.iter().map(|r| r.truncated(n)).collect::<Result<_>>()?))
}

/// Runs the full protocol and writes every artifact below `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, log: &mut dyn FnMut(&str)) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::from(e).in_stage("setup"))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml()?).map_err(|e| Error::from(e).in_stage("setup"))?;
    let digest = cfg.digest()?;

    log("generating datasets");
    let test_cfg = cfg.test_dataset();
    let (train, test, train_digest, test_digest) = (|| -> Result<_> {
        let train = generate_records(&cfg.dataset)?;
        let test = generate_records(&test_cfg)?;
        let m1 = write_dataset(&cfg.dataset, &train, &out.join("data/train"))?;
        let m2 = write_dataset(&test_cfg, &test, &out.join("data/test"))?;
        Ok((train, test, m1.digest(), m2.digest()))
    })()
    .map_err(|e| e.in_stage("dataset"))?;

    let solver = SolverConfig::with_tolerance(cfg.dataset.tolerance);
    let grid = cfg.dataset.grid()?;
    let noisy = (|| -> Result<Vec<Vec<TrainingRecord>>> {
        let bg = Background::new(&grid, 1.0, cfg.dataset.pairs as u32, &solver)?;
        cfg.noise
            .iter()
            .map(|&delta| {
                let spec = NoiseSpec::new(delta, cfg.noise_seed);
                test.iter().enumerate().map(|(k, r)| bg.with_noise(r, &spec, test_cfg.first_index + k)).collect()
            })
            .collect()
    })()
    .map_err(|e| e.in_stage("noise"))?;

    let models = out.join("models");
    std::fs::create_dir_all(&models).map_err(|e| Error::from(e).in_stage("setup"))?;
    let mut ctx = Ctx { cfg, out, digest: digest.clone(), test: &test, noisy: &noisy, log };
    let mut cells = Vec::new();

    for &n in &cfg.pairs {
        let train_n = truncate_all(&train, n)?;
        let tests_n = ctx.noisy.iter().map(|t| truncate_all(t, n)).collect::<Result<Vec<_>>>()?;
        for &seed in &cfg.seeds {
            if let Some(base) = &cfg.fnn {
                let stage = format!("train-fnn n={n} seed={seed}");
                (ctx.log)(&stage);
                let fc = FnnConfig { pairs: n, ..base.clone() };
                let (model, rep) = fnn::train(&train_n, &fc, seed, &mut TrainOptions::default()).map_err(|e| e.in_stage(&stage))?;
                let path = models.join(format!("fnn_n{n}_s{seed}.eitp"));
                let bytes = model.store.to_bytes();
                std::fs::write(&path, &bytes).map_err(|e| Error::from(e).in_stage(&stage))?;
                let sha = sha256_hex(&bytes);
                for (t, &delta) in tests_n.iter().zip(&cfg.noise) {
                    let stage = format!("predict-fnn n={n} seed={seed} delta={delta}");
                    let preds = t.iter().map(|r| fnn::predict_field(&model, r)).collect::<Result<Vec<_>>>().map_err(|e| e.in_stage(&stage))?;
                    cells.push(ctx.record_cell("fnn", n, seed, delta, preds, ctx.test, Some((&path, sha.clone(), rep.final_loss())))?);
                }
            }
            if let Some(base) = &cfg.cnn {
                let stage = format!("train-cnn n={n} seed={seed}");
                (ctx.log)(&stage);
                let cc = CnnConfig { pairs: n, ..base.clone() };
                let (model, rep) = cnn::train(&train_n, &cc, seed, &mut TrainOptions::default()).map_err(|e| e.in_stage(&stage))?;
                let path = models.join(format!("cnn_n{n}_s{seed}.eitp"));
                let bytes = model.store.to_bytes();
                std::fs::write(&path, &bytes).map_err(|e| Error::from(e).in_stage(&stage))?;
                let sha = sha256_hex(&bytes);
                for (t, &delta) in tests_n.iter().zip(&cfg.noise) {
                    let stage = format!("predict-cnn n={n} seed={seed} delta={delta}");
                    let preds = t.iter().map(|r| cnn::predict_field(&model, r)).collect::<Result<Vec<_>>>().map_err(|e| e.in_stage(&stage))?;
                    cells.push(ctx.record_cell("cnn", n, seed, delta, preds, ctx.test, Some((&path, sha.clone(), rep.final_loss())))?);
                }
            }
        }
    }

    if cfg.classic_baseline {
        (ctx.log)("classic baseline");
        let domain: Arc<dyn Domain> = Arc::new(SquareDomain::new(&grid));
        let probing = NumericProbing::new(domain.clone(), &solver).map_err(|e| e.in_stage("classic"))?;
        for (t, &delta) in ctx.noisy.iter().zip(&cfg.noise) {
            let preds = t
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let p = &r.pairs[0];
                    index_field_classic(domain.as_ref(), &p.f, &p.g, 1.0, CLASSIC_GAMMA, &probing, &solver)
                        .map(|c| c.field)
                        .map_err(|e| Error::Record { sample: test_cfg.first_index + k, source: Box::new(e) })
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.in_stage(format!("classic delta={delta}")))?;
            cells.push(ctx.record_cell("classic", 1, 0, delta, preds, ctx.test, None)?);
        }
    }

    let report = ExperimentReport { name: cfg.name.clone(), config_digest: digest, train_digest, test_digest, cells };
    std::fs::write(out.join(REPORT_FILE), report.to_toml()?).map_err(|e| Error::from(e).in_stage("report"))?;
    Ok(report)
}

/// Noiseless records for the blocked-centre conductivity and for the same
/// ring with its centre removed, in that order.
pub fn sensitivity_records(grid: &CartesianGrid, pairs: usize, cfg: &SolverConfig) -> Result<[TrainingRecord; 2]> {
    let (with, without) = blocked_center_pair();
    let bg = Background::new(grid, 1.0, pairs as u32, cfg)?;
    Ok([bg.build_record(&with, pairs, &NoiseSpec::none(), 0)?, bg.build_record(&without, pairs, &NoiseSpec::none(), 1)?])
}
