//! Convolutional encoder-decoder over the stacked `φ` images.
//!
//! Input channels are the two coordinate planes followed by `φ¹..φᴺ`.
//! Encoder block `k`: `s_k = sigmoid(BN(conv3×3 z))`, `z ← maxpool(s_k)`.
//! Decoder block `k` (deepest first): `t = sigmoid(convT2×2 z)`,
//! `z ← sigmoid(BN(conv3×3 [t, s_k]))`. A 1×1 convolution and a sigmoid
//! produce the index image.

use rand::seq::index::sample as choose;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CartesianGrid, IndexField};
use crate::nn::gradcheck::{self, GradCheck};
use crate::nn::{Graph, Mode, ParamId, ParameterStore, Sgd, Tensor, Var};
use crate::pipeline::{stream_rng, TrainingRecord};
use crate::train::{Loop, TrainOptions, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    pub pairs: usize,
    /// Channels of each encoder block; the decoder mirrors them.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub learning_rate: f64,
    pub momentum: Option<f64>,
    pub batch_samples: usize,
    pub iterations: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self { pairs: 10, channels: vec![16, 32, 64], kernel: 3, learning_rate: 0.1, momentum: None, batch_samples: 8, iterations: 20_000 }
    }
}

impl CnnConfig {
    pub fn input_channels(&self) -> usize {
        self.pairs + 2
    }

    pub fn depth(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pairs == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return bad("cnn: pairs and channel counts must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("cnn: kernel {} must be odd", self.kernel));
        }
        if !(self.learning_rate > 0.0) || self.batch_samples == 0 {
            return bad("cnn: learning rate and batch size must be positive".into());
        }
        Ok(())
    }

    /// The grid must halve cleanly once per encoder block.
    pub fn check_grid(&self, grid: &CartesianGrid) -> Result<()> {
        let f = 1usize << self.depth();
        if !grid.n1.is_multiple_of(f) || !grid.n2.is_multiple_of(f) || grid.n1 / f < 1 {
            return Err(Error::shape(format!("grid {}×{} is not divisible by {f}", grid.n1, grid.n2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    enc: Vec<(Conv, Norm)>,
    up: Vec<Conv>,
    dec: Vec<(Conv, Norm)>,
    head: Conv,
}

#[derive(Debug, Clone)]
pub struct Cnn {
    pub config: CnnConfig,
    pub store: ParameterStore,
    ids: Ids,
}

/// Parameter names and shapes in creation order: `(name, shape, fan_in)`;
/// a zero fan-in marks a non-weight tensor.
fn layout(cfg: &CnnConfig) -> Vec<(String, Vec<usize>, usize)> {
    let k = cfg.kernel;
    let mut v = Vec::new();
    let conv = |v: &mut Vec<_>, name: String, co: usize, ci: usize, k: usize| {
        v.push((format!("{name}.w"), vec![co, ci, k, k], ci * k * k));
        v.push((format!("{name}.b"), vec![co], 0));
    };
    let norm = |v: &mut Vec<(String, Vec<usize>, usize)>, name: String, c: usize| {
        for s in ["gamma", "beta", "mean", "var"] {
            v.push((format!("{name}.{s}"), vec![c], 0));
        }
    };
    let mut ci = cfg.input_channels();
    for (d, &c) in cfg.channels.iter().enumerate() {
        conv(&mut v, format!("enc{d}.conv"), c, ci, k);
        norm(&mut v, format!("enc{d}.bn"), c);
        ci = c;
    }
    for d in (0..cfg.depth()).rev() {
        let c = cfg.channels[d];
        // transposed filters are [in, out, k, k]
        v.push((format!("dec{d}.up.w"), vec![ci, c, 2, 2], ci * 4));
        v.push((format!("dec{d}.up.b"), vec![c], 0));
        conv(&mut v, format!("dec{d}.conv"), c, 2 * c, k);
        norm(&mut v, format!("dec{d}.bn"), c);
        ci = c;
    }
    conv(&mut v, "head".into(), 1, ci, 1);
    v
}

impl Cnn {
    /// Weights uniform in `±1/√fan_in`; biases and shifts zero, scales one,
    /// running statistics `(0, 1)`.
    pub fn new(config: &CnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, 0);
        let mut store = ParameterStore::new();
        for (name, shape, fan_in) in layout(config) {
            if fan_in > 0 {
                store.add_uniform(&name, &shape, fan_in, &mut rng)?;
            } else if name.ends_with(".mean") {
                store.add_buffer(&name, Tensor::zeros(&shape))?;
            } else if name.ends_with(".var") {
                store.add_buffer(&name, Tensor::full(&shape, 1.0))?;
            } else if name.ends_with(".gamma") {
                store.add(&name, Tensor::full(&shape, 1.0))?;
            } else {
                store.add(&name, Tensor::zeros(&shape))?;
            }
        }
        Self::from_store(config, store)
    }

    pub fn from_store(config: &CnnConfig, store: ParameterStore) -> Result<Self> {
        config.validate()?;
        let expected = layout(config);
        if store.len() != expected.len() {
            return Err(Error::Format { kind: "EITP checkpoint", reason: "unexpected parameters for this architecture".into() });
        }
        for (name, shape, _) in &expected {
            let id = store.find(name).ok_or_else(|| Error::Format { kind: "EITP checkpoint", reason: format!("missing {name}") })?;
            if &store.get(id).shape != shape {
                return Err(Error::Format { kind: "EITP checkpoint", reason: format!("{name} has shape {:?}", store.get(id).shape) });
            }
        }
        let id = |n: String| store.find(&n).expect("checked above");
        let conv = |n: &str| Conv { w: id(format!("{n}.w")), b: id(format!("{n}.b")) };
        let norm = |n: &str| Norm { gamma: id(format!("{n}.gamma")), beta: id(format!("{n}.beta")), mean: id(format!("{n}.mean")), var: id(format!("{n}.var")) };
        let depth = config.depth();
        let ids = Ids {
            enc: (0..depth).map(|d| (conv(&format!("enc{d}.conv")), norm(&format!("enc{d}.bn")))).collect(),
            up: (0..depth).map(|d| conv(&format!("dec{d}.up"))).collect(),
            dec: (0..depth).map(|d| (conv(&format!("dec{d}.conv")), norm(&format!("dec{d}.bn")))).collect(),
            head: conv("head"),
        };
        Ok(Self { config: config.clone(), store, ids })
    }

    fn conv_bn_sigmoid(&self, g: &mut Graph, x: Var, c: Conv, n: Norm) -> Result<Var> {
        let (w, b) = (g.param(&self.store, c.w), g.param(&self.store, c.b));
        let y = g.conv2d(x, w, b, 1, self.config.kernel / 2)?;
        let (ga, be) = (g.param(&self.store, n.gamma), g.param(&self.store, n.beta));
        let y = g.batchnorm(&self.store, y, ga, be, n.mean, n.var)?;
        g.sigmoid(y)
    }

    /// Output image `[B, 1, H, W]` in `(0, 1)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).nchw()?;
        if c != self.config.input_channels() {
            return Err(Error::shape(format!("input has {c} channels, model expects {}", self.config.input_channels())));
        }
        let f = 1usize << self.config.depth();
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("image {h}×{w} is not divisible by {f}")));
        }
        let mut z = x;
        let mut skips = Vec::with_capacity(self.config.depth());
        for (cv, n) in &self.ids.enc {
            let s = self.conv_bn_sigmoid(g, z, *cv, *n)?;
            skips.push(s);
            z = g.maxpool2(s)?;
        }
        for d in (0..self.config.depth()).rev() {
            let up = self.ids.up[d];
            let (w, b) = (g.param(&self.store, up.w), g.param(&self.store, up.b));
            let t = g.conv_transpose2d(z, w, b, 2)?;
            let t = g.sigmoid(t)?;
            let cat = g.concat(t, skips[d])?;
            let (cv, n) = self.ids.dec[d];
            z = self.conv_bn_sigmoid(g, cat, cv, n)?;
        }
        let (w, b) = (g.param(&self.store, self.ids.head.w), g.param(&self.store, self.ids.head.b));
        let y = g.conv2d(z, w, b, 1, 0)?;
        g.sigmoid(y)
    }

    /// Eval-mode prediction of one `[C, H, W]` input.
    pub fn predict_image(&self, input: &Tensor) -> Result<Vec<f64>> {
        let mut shape = vec![1];
        shape.extend_from_slice(&input.shape);
        let mut g = Graph::new(Mode::Eval);
        let x = g.input(Tensor::new(shape, input.data.clone())?)?;
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).data.clone())
    }
}

/// `[N + 2, n2, n1]`: the `x1` plane, the `x2` plane, then `φ¹..φᴺ`.
pub fn build_input_tensor(record: &TrainingRecord) -> Tensor {
    let grid = record.grid();
    let mut data = Vec::with_capacity((record.pair_count() + 2) * grid.len());
    data.extend(grid.nodes().map(|p| p[0]));
    data.extend(grid.nodes().map(|p| p[1]));
    for phi in &record.phi {
        data.extend_from_slice(&phi.values);
    }
    Tensor { shape: vec![record.pair_count() + 2, grid.n2, grid.n1], data }
}

fn check_record(config: &CnnConfig, record: &TrainingRecord) -> Result<()> {
    if record.pair_count() != config.pairs {
        return Err(Error::shape(format!("record has {} pairs, model expects {}", record.pair_count(), config.pairs)));
    }
    config.check_grid(record.grid())
}

/// Minibatch SGD on the mean squared error against the truth images.
pub fn train(records: &[TrainingRecord], config: &CnnConfig, seed: u64, opts: &mut TrainOptions<'_, Cnn>) -> Result<(Cnn, TrainReport)> {
    config.validate()?;
    let first = records.first().ok_or_else(|| Error::invalid("no training records"))?;
    for r in records {
        check_record(config, r)?;
        if r.grid() != first.grid() {
            return Err(Error::shape("training records live on different grids"));
        }
    }
    let grid = first.grid();
    let (c, hw) = (config.input_channels(), grid.len());
    let mut model = Cnn::new(config, seed)?;
    let mut opt = Sgd::with_momentum(config.learning_rate, config.momentum)?;
    let mut rng = stream_rng(seed, 1);
    let mut lp = Loop::new(opts)?;
    let per = config.batch_samples.min(records.len());
    for it in 0..config.iterations {
        let picks = choose(&mut rng, records.len(), per).into_vec();
        let mut x = Vec::with_capacity(per * c * hw);
        let mut target = Vec::with_capacity(per * hw);
        for &s in &picks {
            x.extend_from_slice(&build_input_tensor(&records[s]).data);
            target.extend_from_slice(&records[s].truth.values);
        }
        let mut g = Graph::new(Mode::Train);
        let step = (|| -> Result<f64> {
            let xv = g.constant(Tensor { shape: vec![per, c, grid.n2, grid.n1], data: x })?;
            let y = model.forward(&mut g, xv)?;
            let loss = g.mse(y, &target)?;
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
        g.commit_buffers(&mut model.store);
        if lp.after_step(it, loss, &model, &model.store)? {
            break;
        }
    }
    let report = lp.report;
    Ok((model, report))
}

pub fn predict_field(model: &Cnn, record: &TrainingRecord) -> Result<IndexField> {
    check_record(&model.config, record)?;
    let y = model.predict_image(&build_input_tensor(record))?;
    Ok(IndexField::from_clamped(record.grid().clone(), y))
}

/// Parameter gradients of the MSE of a one-level network (4 channels) on
/// two random 8×8 inputs against central differences, in train mode so
/// that batch statistics are differentiated too.
pub fn toy_gradient_check(seed: u64) -> Result<GradCheck> {
    let cfg = CnnConfig { pairs: 1, channels: vec![4], ..CnnConfig::default() };
    let mut m = Cnn::new(&cfg, seed)?;
    let mut rng = stream_rng(seed, 7);
    for id in m.store.ids().collect::<Vec<_>>() {
        if m.store.is_trainable(id) {
            m.store.get_mut(id).data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    let x: Vec<f64> = (0..2 * 3 * 8 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..2 * 64).map(|k| ((k % 7) < 3) as u8 as f64).collect();
    let (ids, config) = (m.ids.clone(), m.config.clone());
    let run = |s: &ParameterStore| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let model = Cnn { config: config.clone(), store: s.clone(), ids: ids.clone() };
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(Tensor::new(vec![2, 3, 8, 8], x.clone())?)?;
        let y = model.forward(&mut g, xv)?;
        let loss = g.mse(y, &target)?;
        g.backward(loss)?;
        Ok((g.value(loss).data[0], g.param_grads(&model.store).0))
    };
    gradcheck::check_params(&mut m.store, &|s| run(s).map(|r| r.1), &|s| run(s).map(|r| r.0), None, gradcheck::MODEL_STEP)
}
