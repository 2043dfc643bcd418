//! Pointwise fully connected classifier.
//!
//! A node `x` is described by `[x1, x2, ∂x φ¹..∂x φᴺ, ∂y φ¹..∂y φᴺ]`, zero
//! padded to the hidden width. The network is
//! `softmax ∘ ψ_out ∘ τ_M ∘ ⋯ ∘ τ_1 ∘ ψ_in` with residual blocks
//! `τ(z) = act(W₂ act(W₁z + b₁) + b₂) + z`. Output 0 is the probability of
//! lying inside an inclusion.

use rand::seq::index::sample as choose;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::IndexField;
use crate::metrics;
use crate::nn::gradcheck::{self, GradCheck};
use crate::nn::{softmax2, Graph, Mode, ParamId, ParameterStore, Sgd, Tensor, Var};
use crate::pipeline::{stream_rng, TrainingRecord};
use crate::train::{Loop, TrainOptions, TrainReport};

pub const INSIDE: usize = 0;
pub const OUTSIDE: usize = 1;

const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussianKind {
    #[default]
    Elementwise,
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FnnConfig {
    pub pairs: usize,
    pub width: usize,
    pub blocks: usize,
    /// Leading blocks with the Gaussian activation; `None` means half.
    pub gaussian_blocks: Option<usize>,
    pub bandwidth: f64,
    pub gaussian: GaussianKind,
    pub learning_rate: f64,
    pub momentum: Option<f64>,
    pub batch_samples: usize,
    pub batch_points: usize,
    pub iterations: usize,
    /// Loss weights of the inside and outside classes.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for FnnConfig {
    fn default() -> Self {
        Self {
            pairs: 10,
            width: 64,
            blocks: 6,
            gaussian_blocks: None,
            bandwidth: 0.5,
            gaussian: GaussianKind::Elementwise,
            learning_rate: 0.05,
            momentum: None,
            batch_samples: 16,
            batch_points: 1024,
            iterations: 20_000,
            class_weights: None,
        }
    }
}

impl FnnConfig {
    pub fn input_len(&self) -> usize {
        2 * self.pairs + 2
    }

    pub fn gaussian_count(&self) -> usize {
        self.gaussian_blocks.unwrap_or(self.blocks / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pairs == 0 {
            return bad("fnn: pairs must be positive".into());
        }
        if self.width < self.input_len() {
            return bad(format!("fnn: width {} is below the input length {}", self.width, self.input_len()));
        }
        if self.gaussian_count() > self.blocks {
            return bad(format!("fnn: {} Gaussian blocks exceed {} blocks", self.gaussian_count(), self.blocks));
        }
        if !(self.bandwidth > 0.0) || !(self.learning_rate > 0.0) {
            return bad("fnn: bandwidth and learning rate must be positive".into());
        }
        if self.batch_samples == 0 || self.batch_points == 0 {
            return bad("fnn: batch sizes must be positive".into());
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0)) {
                return bad("fnn: class weights must be positive".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Fnn {
    pub config: FnnConfig,
    pub store: ParameterStore,
    input: Dense,
    blocks: Vec<(Dense, Dense)>,
    output: Dense,
}

fn dense_ids(store: &ParameterStore, name: &str, out: usize, inp: usize) -> Result<Dense> {
    let get = |suffix: &str, shape: &[usize]| -> Result<ParamId> {
        let full = format!("{name}.{suffix}");
        let id = store.find(&full).ok_or_else(|| Error::Format { kind: "EITP checkpoint", reason: format!("missing {full}") })?;
        if store.get(id).shape != shape {
            return Err(Error::Format { kind: "EITP checkpoint", reason: format!("{full} has shape {:?}", store.get(id).shape) });
        }
        Ok(id)
    };
    Ok(Dense { w: get("w", &[out, inp])?, b: get("b", &[out])? })
}

fn layer_names(blocks: usize) -> Vec<String> {
    let mut v = vec!["in".to_string()];
    for k in 0..blocks {
        v.push(format!("block{k}.a"));
        v.push(format!("block{k}.b"));
    }
    v.push("out".into());
    v
}

impl Fnn {
    /// Fresh model; weights uniform in `±1/√fan_in`, biases zero.
    pub fn new(config: &FnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, 0);
        let mut store = ParameterStore::new();
        let w = config.width;
        for name in layer_names(config.blocks) {
            let out = if name == "out" { 2 } else { w };
            store.add_uniform(&format!("{name}.w"), &[out, w], w, &mut rng)?;
            store.add(&format!("{name}.b"), Tensor::zeros(&[out]))?;
        }
        Self::from_store(config, store)
    }

    pub fn from_store(config: &FnnConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let input = dense_ids(&store, "in", w, w)?;
        let blocks = (0..config.blocks)
            .map(|k| Ok((dense_ids(&store, &format!("block{k}.a"), w, w)?, dense_ids(&store, &format!("block{k}.b"), w, w)?)))
            .collect::<Result<Vec<_>>>()?;
        let output = dense_ids(&store, "out", 2, w)?;
        if store.len() != 2 * (config.blocks * 2 + 2) {
            return Err(Error::Format { kind: "EITP checkpoint", reason: "unexpected parameters for this architecture".into() });
        }
        Ok(Self { config: config.clone(), store, input, blocks, output })
    }

    fn affine(&self, g: &mut Graph, x: Var, d: Dense) -> Result<Var> {
        let (w, b) = (g.param(&self.store, d.w), g.param(&self.store, d.b));
        g.dense(x, w, b)
    }

    fn activate(&self, g: &mut Graph, z: Var, block: usize) -> Result<Var> {
        if block < self.config.gaussian_count() {
            match self.config.gaussian {
                GaussianKind::Elementwise => g.gaussian(z, self.config.bandwidth),
                GaussianKind::Radial => g.gaussian_radial(z, self.config.bandwidth),
            }
        } else {
            g.clipped_relu(z)
        }
    }

    /// Logits `[B, 2]` for padded inputs `[B, width]`.
    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut z = self.affine(g, x, self.input)?;
        for (k, (a, b)) in self.blocks.iter().enumerate() {
            let h = self.affine(g, z, *a)?;
            let h = self.activate(g, h, k)?;
            let h = self.affine(g, h, *b)?;
            let h = self.activate(g, h, k)?;
            z = g.add(h, z)?;
        }
        self.affine(g, z, self.output)
    }

    /// `(p_inside, p_outside)` for each row of `inputs` (`rows × width`).
    pub fn probabilities(&self, inputs: &[f64]) -> Result<Vec<[f64; 2]>> {
        let w = self.config.width;
        if !inputs.len().is_multiple_of(w) {
            return Err(Error::shape(format!("input length {} is not a multiple of width {w}", inputs.len())));
        }
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::new(vec![inputs.len() / w, w], inputs.to_vec())?)?;
        let l = self.logits(&mut g, x)?;
        Ok(g.value(l).data.chunks(2).map(|r| softmax2(r[0], r[1]).0).collect())
    }
}

/// Padded input of one node: `[x1, x2, ∂x φ¹..∂x φᴺ, ∂y φ¹..∂y φᴺ, 0, ..]`.
pub fn build_input(x: [f64; 2], grads: &[[f64; 2]], width: usize) -> Result<Vec<f64>> {
    let n = grads.len();
    if width < 2 * n + 2 {
        return Err(Error::shape(format!("width {width} cannot hold {} features", 2 * n + 2)));
    }
    let mut v = vec![0.0; width];
    v[0] = x[0];
    v[1] = x[1];
    for (k, d) in grads.iter().enumerate() {
        v[2 + k] = d[0];
        v[2 + n + k] = d[1];
    }
    Ok(v)
}

/// Padded inputs of every node of `record`, node-major.
pub fn record_inputs(record: &TrainingRecord, pairs: usize, width: usize) -> Result<Vec<f64>> {
    if record.pair_count() != pairs {
        return Err(Error::shape(format!("record has {} pairs, model expects {pairs}", record.pair_count())));
    }
    let grid = record.grid();
    let mut out = Vec::with_capacity(grid.len() * width);
    let mut grads = vec![[0.0; 2]; pairs];
    for k in 0..grid.len() {
        for (d, f) in grads.iter_mut().zip(&record.grad) {
            *d = [f.dx[k], f.dy[k]];
        }
        out.extend(build_input(grid.node_at(k), &grads, width)?);
    }
    Ok(out)
}

fn labels_of(truth: &IndexField) -> Vec<usize> {
    truth.values.iter().map(|&v| if v >= metrics::THRESHOLD { INSIDE } else { OUTSIDE }).collect()
}

/// Minibatch SGD on the weighted cross-entropy. Each iteration draws
/// `batch_samples` distinct records and `batch_points` nodes per record.
pub fn train(records: &[TrainingRecord], config: &FnnConfig, seed: u64, opts: &mut TrainOptions<'_, Fnn>) -> Result<(Fnn, TrainReport)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::invalid("no training records"));
    }
    let w = config.width;
    for r in records {
        if r.pair_count() != config.pairs {
            return Err(Error::shape(format!("record has {} pairs, model expects {}", r.pair_count(), config.pairs)));
        }
    }
    let labels: Vec<Vec<usize>> = records.iter().map(|r| labels_of(&r.truth)).collect();
    let mut model = Fnn::new(config, seed)?;
    let mut opt = Sgd::with_momentum(config.learning_rate, config.momentum)?;
    let weights = config.class_weights.unwrap_or([1.0, 1.0]);
    let mut rng = stream_rng(seed, 1);
    let mut lp = Loop::new(opts)?;
    let per = config.batch_samples.min(records.len());
    let rows = per * config.batch_points;
    let mut batch = Vec::with_capacity(rows * w);
    let mut batch_labels = Vec::with_capacity(rows);
    let mut grads = vec![[0.0; 2]; config.pairs];
    for it in 0..config.iterations {
        batch.clear();
        batch_labels.clear();
        for s in choose(&mut rng, records.len(), per) {
            let rec = &records[s];
            let nodes = labels[s].len();
            for _ in 0..config.batch_points {
                let k = rng.random_range(0..nodes);
                for (d, f) in grads.iter_mut().zip(&rec.grad) {
                    *d = [f.dx[k], f.dy[k]];
                }
                batch.extend(build_input(rec.grid().node_at(k), &grads, w)?);
                batch_labels.push(labels[s][k]);
            }
        }
        let mut g = Graph::new(Mode::Train);
        let step = (|| -> Result<f64> {
            let x = g.constant(Tensor { shape: vec![rows, w], data: batch.clone() })?;
            let logits = model.logits(&mut g, x)?;
            let loss = g.softmax_xent(logits, &batch_labels, weights)?;
            g.backward(loss)?;
            Ok(g.value(loss).data[0])
        })();
        let loss = match step {
            Ok(l) => l,
            Err(Error::NonFinite(_)) => return Err(Error::Diverged { iteration: it }),
            Err(e) => return Err(e),
        };
        let grads = g.param_grads(&model.store);
        opt.step(&mut model.store, &grads)?;
        if lp.after_step(it, loss, &model, &model.store)? {
            break;
        }
    }
    let report = lp.report;
    Ok((model, report))
}

/// Probability of lying inside an inclusion at every node.
pub fn predict_field(model: &Fnn, record: &TrainingRecord) -> Result<IndexField> {
    let w = model.config.width;
    let inputs = record_inputs(record, model.config.pairs, w)?;
    let probs = inputs
        .par_chunks(PREDICT_CHUNK * w)
        .map(|c| model.probabilities(c))
        .collect::<Result<Vec<_>>>()?;
    let values = probs.into_iter().flatten().map(|p| p[INSIDE]);
    Ok(IndexField::from_clamped(record.grid().clone(), values))
}

/// Pointwise accuracy at threshold 0.5 pooled over `records`.
pub fn pooled_accuracy(model: &Fnn, records: &[TrainingRecord]) -> Result<f64> {
    let (mut hits, mut total) = (0.0, 0usize);
    for r in records {
        let p = predict_field(model, r)?;
        hits += metrics::accuracy(&p, &r.truth, metrics::THRESHOLD)? * p.values.len() as f64;
        total += p.values.len();
    }
    Ok(hits / total as f64)
}

/// A three-pair model of width 8 with one Gaussian block.
pub fn toy_config(gaussian: GaussianKind) -> FnnConfig {
    FnnConfig { pairs: 3, width: 8, blocks: 2, gaussian_blocks: Some(1), gaussian, ..FnnConfig::default() }
}

/// Parameter gradients of the cross-entropy of a toy model on six random
/// points against central differences. Biases are randomized so that
/// every path carries signal.
pub fn toy_gradient_check(gaussian: GaussianKind, seed: u64) -> Result<GradCheck> {
    let mut m = Fnn::new(&toy_config(gaussian), seed)?;
    let mut rng = stream_rng(seed, 7);
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.name(id).ends_with(".b") {
            m.store.get_mut(id).data.iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
    }
    let x: Vec<f64> = (0..8 * 6).map(|_| rng.random_range(-0.5..0.5)).collect();
    let labels = [INSIDE, OUTSIDE, OUTSIDE, INSIDE, OUTSIDE, INSIDE];
    let (ids_in, ids_b, ids_out) = (m.input, m.blocks.clone(), m.output);
    let config = m.config.clone();
    let run = |s: &ParameterStore| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let model = Fnn { config: config.clone(), store: s.clone(), input: ids_in, blocks: ids_b.clone(), output: ids_out };
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(Tensor::new(vec![6, 8], x.clone())?)?;
        let l = model.logits(&mut g, xv)?;
        let loss = g.softmax_xent(l, &labels, [1.0, 1.0])?;
        g.backward(loss)?;
        Ok((g.value(loss).data[0], g.param_grads(&model.store).0))
    };
    gradcheck::check_params(&mut m.store, &|s| run(s).map(|r| r.1), &|s| run(s).map(|r| r.0), None, gradcheck::MODEL_STEP)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{generate_records, DatasetConfig};

    fn tiny(pairs: usize) -> FnnConfig {
        FnnConfig { pairs, width: 8, blocks: 2, batch_samples: 2, batch_points: 16, iterations: 30, learning_rate: 0.1, ..FnnConfig::default() }
    }

    #[test]
    fn input_layout() {
        assert_eq!(build_input([0.0, 0.0], &[[3.0, 4.0]], 4).unwrap(), vec![0.0, 0.0, 3.0, 4.0]);
        let v = build_input([0.5, -0.5], &[[1.0, 2.0], [3.0, 4.0]], 64).unwrap();
        assert_eq!(&v[..6], &[0.5, -0.5, 1.0, 3.0, 2.0, 4.0]);
        assert!(v[6..].iter().all(|x| *x == 0.0));
        let v = build_input([0.0, 0.0], &[[0.0, 0.0]], 64).unwrap();
        assert_eq!(v.iter().filter(|x| **x == 0.0).count(), 64);
        assert!(build_input([0.0, 0.0], &[[0.0; 2]; 4], 8).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(FnnConfig::default().validate().is_ok());
        assert!(FnnConfig { width: 20, pairs: 10, ..FnnConfig::default() }.validate().is_err());
        assert!(FnnConfig { gaussian_blocks: Some(7), ..FnnConfig::default() }.validate().is_err());
        let parsed: FnnConfig = toml::from_str("pairs = 1\nwidth = 8\ngaussian = \"radial\"").unwrap();
        assert_eq!(parsed.gaussian, GaussianKind::Radial);
        assert!(toml::from_str::<FnnConfig>("widht = 8").is_err());
    }

    #[test]
    fn probabilities_are_normalized() {
        let m = Fnn::new(&tiny(2), 3).unwrap();
        let mut rng = stream_rng(9, 0);
        let x: Vec<f64> = (0..8 * 50).map(|_| rng.random_range(-3.0..3.0)).collect();
        for p in m.probabilities(&x).unwrap() {
            assert!((p[0] + p[1] - 1.0).abs() <= 1e-15);
            assert!(p[0] > 0.0 && p[0] < 1.0);
        }
    }

    #[test]
    fn zeroed_blocks_reduce_to_the_outer_maps() {
        for (gaussian_blocks, shift) in [(0usize, 0.0f64), (2, 2.0)] {
            let cfg = FnnConfig { gaussian_blocks: Some(gaussian_blocks), ..tiny(2) };
            let mut m = Fnn::new(&cfg, 4).unwrap();
            for k in 0..cfg.blocks {
                for part in ["a", "b"] {
                    let id = m.store.find(&format!("block{k}.{part}.w")).unwrap();
                    m.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
            let x: Vec<f64> = (0..16).map(|k| (k as f64 * 0.37).sin()).collect();
            let got = m.probabilities(&x).unwrap();
            // by hand: ψ_out(ψ_in(x) + shift), where each Gaussian block adds exp(0) = 1
            let w_in = &m.store.get(m.store.find("in.w").unwrap()).data;
            let w_out = &m.store.get(m.store.find("out.w").unwrap()).data;
            for (row, p) in x.chunks(8).zip(got) {
                let z: Vec<f64> = (0..8).map(|i| (0..8).map(|j| w_in[i * 8 + j] * row[j]).sum::<f64>() + shift).collect();
                let l: Vec<f64> = (0..2).map(|i| (0..8).map(|j| w_out[i * 8 + j] * z[j]).sum()).collect();
                let want = softmax2(l[0], l[1]).0;
                assert!((p[0] - want[0]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn full_model_gradient_check() {
        for gaussian in [GaussianKind::Elementwise, GaussianKind::Radial] {
            let r = toy_gradient_check(gaussian, 5).unwrap();
            assert!(r.max_relative_error < 1e-4, "{gaussian:?}: {r:?}");
            assert_eq!(r.checked, Fnn::new(&toy_config(gaussian), 5).unwrap().store.trainable_count());
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable_from_checkpoints() {
        let ds = DatasetConfig { n1: 16, n2: 16, ..DatasetConfig::desk(1, 3, 2, 11) };
        let recs = generate_records(&ds).unwrap();
        let cfg = tiny(2);
        let dir = tempfile::tempdir().unwrap();
        let mut opts = TrainOptions { checkpoint_every: Some(10), checkpoint_dir: Some(dir.path().to_path_buf()), monitor: None };
        let (m1, r1) = train(&recs, &cfg, 21, &mut opts).unwrap();
        let (m2, r2) = train(&recs, &cfg, 21, &mut TrainOptions::default()).unwrap();
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(m1.store.to_bytes(), m2.store.to_bytes());
        assert_eq!(r1.checkpoints.len(), 3);
        let last = ParameterStore::load(r1.checkpoints.last().unwrap()).unwrap();
        assert_eq!(last, m1.store);
        assert_eq!(last.step, 30);
        let back = Fnn::from_store(&cfg, last).unwrap();
        assert_eq!(predict_field(&back, &recs[0]).unwrap(), predict_field(&m1, &recs[0]).unwrap());
        let (_, r3) = train(&recs, &cfg, 22, &mut TrainOptions::default()).unwrap();
        assert_ne!(r1.losses, r3.losses);
        assert!(Fnn::from_store(&FnnConfig { blocks: 3, ..cfg }, m1.store).is_err());
    }

    #[test]
    fn initial_loss_is_near_ln2_and_monitor_can_stop() {
        let ds = DatasetConfig { n1: 16, n2: 16, ..DatasetConfig::desk(1, 2, 1, 12) };
        let recs = generate_records(&ds).unwrap();
        let cfg = FnnConfig { batch_points: 256, class_weights: None, ..tiny(1) };
        let mut calls = 0;
        let mut opts = TrainOptions {
            monitor: Some(crate::train::Monitor {
                every: 5,
                callback: Box::new(|it, _m: &Fnn| {
                    calls += 1;
                    Ok(it >= 10)
                }),
            }),
            ..TrainOptions::default()
        };
        let (_, r) = train(&recs, &cfg, 1, &mut opts).unwrap();
        drop(opts);
        assert_eq!(calls, 2);
        assert!(r.stopped_early && r.iterations() == 10);
        assert!((r.losses[0] - 2f64.ln()).abs() < 0.3, "{}", r.losses[0]);
    }

    #[test]
    fn predictions_are_pointwise() {
        let ds = DatasetConfig { n1: 16, n2: 16, ..DatasetConfig::desk(1, 1, 2, 13) };
        let rec = &generate_records(&ds).unwrap()[0];
        let m = Fnn::new(&tiny(2), 8).unwrap();
        let f = predict_field(&m, rec).unwrap();
        let inputs = record_inputs(rec, 2, 8).unwrap();
        // evaluating nodes alone, or in reversed order, gives the same values
        let mut rev: Vec<f64> = inputs.chunks(8).rev().flatten().copied().collect();
        let p_rev = m.probabilities(&rev).unwrap();
        for (k, v) in f.values.iter().enumerate() {
            assert_eq!(*v, p_rev[f.values.len() - 1 - k][0]);
        }
        rev.truncate(8);
        assert_eq!(m.probabilities(&rev).unwrap()[0][0], *f.values.last().unwrap());
        assert!(f.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
