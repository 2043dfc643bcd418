use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EITP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named tensors in insertion order. Non-trainable entries are buffers
/// such as batch-norm running statistics.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    pub step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name}")));
        }
        self.names.push(name.to_string());
        self.tensors.push(t);
        self.trainable.push(trainable);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.push(name, t, true)
    }

    pub fn add_buffer(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        self.push(name, t, false)
    }

    /// Weights uniform in `±1/√fan_in`.
    pub fn add_uniform<R: Rng + ?Sized>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<ParamId> {
        let s = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s).map_err(|e| Error::invalid(e.to_string()))?;
        let data = (0..shape.iter().product::<usize>()).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn trainable_count(&self) -> usize {
        self.ids().filter(|i| self.is_trainable(*i)).map(|i| self.get(i).len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for ((name, t), tr) in self.names.iter().zip(&self.tensors).zip(&self.trainable) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(*tr as u8);
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::Format { kind: "EITP checkpoint", reason: r.to_string() };
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(bad("truncated"));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_of = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_of(take(4)?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let mut store = ParameterStore { step: u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")), ..Self::default() };
        let count = u32_of(take(4)?);
        for _ in 0..count {
            let len = u32_of(take(4)?) as usize;
            let name = std::str::from_utf8(take(len)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
            let trainable = match take(1)?[0] {
                0 => false,
                1 => true,
                _ => return Err(bad("bad trainable flag")),
            };
            let nd = u32_of(take(4)?) as usize;
            let shape = (0..nd).map(|_| take(4).map(|b| u32_of(b) as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))).collect::<Result<Vec<_>>>()?;
            store.push(&name, Tensor { shape, data }, trainable).map_err(|_| bad("duplicate name"))?;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Per-parameter gradient buffers aligned with a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Option<Vec<f64>>>);

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn l2_norm(&self) -> f64 {
        self.0.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Gradient descent `θ ← θ − α g`, optionally with heavy-ball momentum
/// `v ← μv + g`, `θ ← θ − αv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64) -> Result<Self> {
        Self::with_momentum(learning_rate, None)
    }

    pub fn with_momentum(learning_rate: f64, momentum: Option<f64>) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {learning_rate} must be positive")));
        }
        if let Some(m) = momentum {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid(format!("momentum {m} not in [0, 1)")));
            }
        }
        Ok(Self { learning_rate, momentum, velocity: Vec::new() })
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients) -> Result<()> {
        if grads.0.len() != store.len() {
            return Err(Error::shape("gradient list does not match the parameter store"));
        }
        if self.velocity.len() != store.len() {
            self.velocity = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        }
        for (k, g) in grads.0.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.trainable[k] {
                continue;
            }
            let p = &mut store.tensors[k].data;
            if g.len() != p.len() {
                return Err(Error::shape(format!("gradient of {} has wrong length", store.names[k])));
            }
            match self.momentum {
                None => p.iter_mut().zip(g).for_each(|(p, g)| *p -= self.learning_rate * g),
                Some(mu) => {
                    let v = &mut self.velocity[k];
                    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                        *v = mu * *v + g;
                        *p -= self.learning_rate * *v;
                    }
                }
            }
        }
        store.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParameterStore::new();
        s.add_uniform("w", &[3, 4], 4, &mut rng).unwrap();
        s.add_buffer("running_mean", Tensor::full(&[3], 0.25)).unwrap();
        s.step = 42;
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"EITP");
        let back = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_bytes(), bytes);
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(s.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn sgd_examples() {
        let mut s = ParameterStore::new();
        let id = s.add("theta", Tensor::scalar(1.0)).unwrap();
        let mut opt = Sgd::new(0.1).unwrap();
        opt.step(&mut s, &Gradients(vec![Some(vec![0.0])])).unwrap();
        assert_eq!(s.get(id).data[0], 1.0);
        // ½θ² has gradient θ
        let g = s.get(id).data.clone();
        opt.step(&mut s, &Gradients(vec![Some(g)])).unwrap();
        assert!((s.get(id).data[0] - 0.9).abs() < 1e-15);
        let mut steps = 1;
        while s.get(id).data[0].abs() >= 1e-6 {
            let g = s.get(id).data.clone();
            opt.step(&mut s, &Gradients(vec![Some(g)])).unwrap();
            steps += 1;
        }
        assert!(steps <= 300, "{steps} steps");
        assert!(Sgd::new(0.0).is_err());
        assert!(opt.step(&mut s, &Gradients(vec![Some(vec![1.0, 2.0])])).is_err());
    }

    #[test]
    fn momentum_accelerates_a_shallow_bowl() {
        let run = |mu: Option<f64>| {
            let mut s = ParameterStore::new();
            let id = s.add("theta", Tensor::scalar(1.0)).unwrap();
            let mut opt = Sgd::with_momentum(0.01, mu).unwrap();
            for _ in 0..200 {
                let g = s.get(id).data.clone();
                opt.step(&mut s, &Gradients(vec![Some(g)])).unwrap();
            }
            s.get(id).data[0].abs()
        };
        assert!(run(Some(0.9)) < run(None));
    }
}
