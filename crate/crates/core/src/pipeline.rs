//! Cauchy data generation: currents, forward solves, noise, Cauchy
//! differences and their harmonic extensions.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{gradient_field, BoundaryLoop, BoundaryTrace, ScalarField, VectorField};
use crate::grid::{conductivity_on_grid, ground_truth_index, polar_angle, sample_scenario, CartesianGrid, ConductivitySample, IndexField, Scenario, Shape};
use crate::solver::{ntd_on, solve_phi_on, Domain, Operator, SolverConfig, SquareDomain};

/// `g_ω = cos(ωθ)` on the loop, projected to zero discrete mean.
pub fn make_current(omega: u32, layout: &Arc<BoundaryLoop>) -> Result<BoundaryTrace> {
    if omega == 0 {
        return Err(Error::invalid("current pattern index must be at least 1"));
    }
    Ok(BoundaryTrace::from_fn(layout.clone(), |p| (omega as f64 * polar_angle(p)).cos()).project_mean_zero())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// One standard normal per boundary node.
    #[default]
    PerNode,
    /// One standard normal per trace.
    PerTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub delta: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self { delta: 0.0, seed: 0, mode: NoiseMode::PerNode }
    }

    pub fn new(delta: f64, seed: u64) -> Self {
        Self { delta, seed, mode: NoiseMode::PerNode }
    }
}

/// Seeded stream for `(seed, stream)`; distinct streams never overlap.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Noise stream of pattern `omega` of record `sample`.
pub fn noise_stream(sample: usize, omega: u32) -> u64 {
    ((sample as u64) << 16) | omega as u64
}

/// `f^δ = (1 + δG) f`, re-centred to zero mean; `stream` picks the draw.
pub fn add_noise(f: &BoundaryTrace, spec: &NoiseSpec, stream: u64) -> Result<BoundaryTrace> {
    if !(spec.delta >= 0.0) {
        return Err(Error::invalid(format!("noise level {} must be nonnegative", spec.delta)));
    }
    if spec.delta == 0.0 {
        return Ok(f.clone());
    }
    let mut rng = stream_rng(spec.seed, stream);
    let values = match spec.mode {
        NoiseMode::PerNode => f
            .values
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (1.0 + spec.delta * z) * v
            })
            .collect(),
        NoiseMode::PerTrace => {
            let z: f64 = StandardNormal.sample(&mut rng);
            f.values.iter().map(|v| (1.0 + spec.delta * z) * v).collect()
        }
    };
    Ok(BoundaryTrace { layout: f.layout.clone(), values }.project_mean_zero())
}

/// `‖f1 − f2‖ / ‖f1‖` in `L²(∂Ω)`.
pub fn relative_difference(f1: &BoundaryTrace, f2: &BoundaryTrace) -> Result<f64> {
    let n = f1.l2_norm();
    if n == 0.0 {
        return Err(Error::invalid("reference trace has zero norm"));
    }
    Ok(f1.sub(f2)?.l2_norm() / n)
}

#[derive(Debug, Clone)]
pub struct CauchyPair {
    pub omega: u32,
    pub g: BoundaryTrace,
    pub f: BoundaryTrace,
}

#[derive(Debug, Clone)]
pub struct TrainingRecord {
    pub sample: ConductivitySample,
    pub sigma: ScalarField,
    pub pairs: Vec<CauchyPair>,
    pub phi: Vec<ScalarField>,
    pub grad: Vec<VectorField>,
    pub truth: IndexField,
}

impl TrainingRecord {
    pub fn grid(&self) -> &CartesianGrid {
        &self.sigma.grid
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// The record restricted to its first `n` patterns.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.pairs.len() {
            return Err(Error::invalid(format!("cannot keep {n} of {} pairs", self.pairs.len())));
        }
        Ok(Self {
            sample: self.sample.clone(),
            sigma: self.sigma.clone(),
            pairs: self.pairs[..n].to_vec(),
            phi: self.phi[..n].to_vec(),
            grad: self.grad[..n].to_vec(),
            truth: self.truth.clone(),
        })
    }
}

/// The homogeneous reference problem: unit background, currents
/// `g_1..g_N` and their responses `Λ_σ0 g_ω`.
#[derive(Debug, Clone)]
pub struct Background {
    pub domain: SquareDomain,
    pub sigma0: f64,
    pub currents: Vec<BoundaryTrace>,
    pub responses: Vec<BoundaryTrace>,
    pub cfg: SolverConfig,
}

impl Background {
    pub fn new(grid: &CartesianGrid, sigma0: f64, patterns: u32, cfg: &SolverConfig) -> Result<Self> {
        if patterns == 0 {
            return Err(Error::invalid("need at least one current pattern"));
        }
        if !(sigma0 > 0.0) {
            return Err(Error::invalid("background conductivity must be positive"));
        }
        let domain = SquareDomain::new(grid);
        let op = Operator::assemble(&ScalarField::from_fn(grid, |_| sigma0))?;
        let currents = (1..=patterns).map(|w| make_current(w, domain.boundary())).collect::<Result<Vec<_>>>()?;
        let responses = currents.iter().map(|g| ntd_on(&domain, &op, g, cfg)).collect::<Result<Vec<_>>>()?;
        Ok(Self { domain, sigma0, currents, responses, cfg: *cfg })
    }

    pub fn grid(&self) -> &CartesianGrid {
        self.domain.grid()
    }

    pub fn patterns(&self) -> usize {
        self.currents.len()
    }

    /// `φ^ω` and `∇φ^ω` from the measured voltage `f_ω`.
    pub fn cauchy_difference(&self, omega: u32, f: &BoundaryTrace) -> Result<(ScalarField, VectorField)> {
        let lam = self
            .responses
            .get(omega as usize - 1)
            .ok_or_else(|| Error::invalid(format!("pattern {omega} not prepared")))?;
        let diff = f.project_mean_zero().sub(lam)?;
        let phi = solve_phi_on(&self.domain, &diff, 0.0, &self.cfg)?;
        let grad = gradient_field(&phi);
        Ok((phi, grad))
    }

    /// Simulates `N` Cauchy pairs for `sample`; `noise` perturbs the
    /// voltages with streams keyed by `index`.
    pub fn build_record(&self, sample: &ConductivitySample, n: usize, noise: &NoiseSpec, index: usize) -> Result<TrainingRecord> {
        let wrap = |e: Error| Error::Record { sample: index, source: Box::new(e) };
        if n == 0 || n > self.patterns() {
            return Err(Error::invalid(format!("pair count {n} outside 1..={}", self.patterns())));
        }
        sample.validate().map_err(wrap)?;
        let grid = self.grid();
        let sigma = conductivity_on_grid(sample, grid);
        let op = Operator::assemble(&sigma).map_err(wrap)?;
        let mut pairs = Vec::with_capacity(n);
        let mut phis = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n);
        for w in 1..=n as u32 {
            let g = self.currents[w as usize - 1].clone();
            let clean = ntd_on(&self.domain, &op, &g, &self.cfg).map_err(wrap)?;
            let f = add_noise(&clean, noise, noise_stream(index, w)).map_err(wrap)?;
            let (phi, grad) = self.cauchy_difference(w, &f).map_err(wrap)?;
            pairs.push(CauchyPair { omega: w, g, f });
            phis.push(phi);
            grads.push(grad);
        }
        Ok(TrainingRecord { truth: ground_truth_index(sample, grid), sample: sample.clone(), sigma, pairs, phi: phis, grad: grads })
    }

    /// Re-derives `φ` and `∇φ` of a stored record from noisy voltages; no
    /// forward solve is repeated.
    pub fn with_noise(&self, record: &TrainingRecord, noise: &NoiseSpec, index: usize) -> Result<TrainingRecord> {
        if noise.delta == 0.0 {
            return Ok(record.clone());
        }
        let mut out = record.clone();
        for (k, pair) in record.pairs.iter().enumerate() {
            let f = add_noise(&pair.f, noise, noise_stream(index, pair.omega))?;
            let (phi, grad) = self.cauchy_difference(pair.omega, &f).map_err(|e| Error::Record { sample: index, source: Box::new(e) })?;
            out.pairs[k].f = f;
            out.phi[k] = phi;
            out.grad[k] = grad;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub scenario: u32,
    pub samples: usize,
    pub pairs: usize,
    pub n1: usize,
    pub n2: usize,
    pub master_seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Offset of the first sample's stream; lets test sets share a seed with
    /// training sets without overlap.
    #[serde(default)]
    pub first_index: usize,
}

fn default_tolerance() -> f64 {
    1e-10
}

impl DatasetConfig {
    pub fn desk(scenario: u32, samples: usize, pairs: usize, master_seed: u64) -> Self {
        Self { scenario, samples, pairs, n1: 64, n2: 64, master_seed, tolerance: default_tolerance(), first_index: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        Scenario::from_index(self.scenario)?;
        if self.samples == 0 || self.pairs == 0 {
            return Err(Error::Config("samples and pairs must be positive".into()));
        }
        CartesianGrid::new(self.n1, self.n2)?;
        SolverConfig::with_tolerance(self.tolerance).validate()
    }

    pub fn grid(&self) -> Result<CartesianGrid> {
        CartesianGrid::new(self.n1, self.n2)
    }
}

/// Draws sample `index` of the configured scenario from its own stream.
pub fn draw_sample(scenario: Scenario, master_seed: u64, index: usize) -> Result<ConductivitySample> {
    let mut rng = stream_rng(master_seed, index as u64);
    sample_scenario(scenario, &mut rng).map_err(|e| Error::Record { sample: index, source: Box::new(e) })
}

/// Generates all records in memory, in sample order.
pub fn generate_records(cfg: &DatasetConfig) -> Result<Vec<TrainingRecord>> {
    cfg.validate()?;
    let scenario = Scenario::from_index(cfg.scenario)?;
    let bg = Background::new(&cfg.grid()?, 1.0, cfg.pairs as u32, &SolverConfig::with_tolerance(cfg.tolerance))?;
    (cfg.first_index..cfg.first_index + cfg.samples)
        .into_par_iter()
        .map(|i| {
            let s = draw_sample(scenario, cfg.master_seed, i)?;
            bg.build_record(&s, cfg.pairs, &NoiseSpec::none(), i)
        })
        .collect()
}

/// The blocked-centre configuration: a small circle at the origin ringed
/// by four larger circles, and the same ring with the centre removed.
pub fn blocked_center_pair() -> (ConductivitySample, ConductivitySample) {
    let ring: Vec<Shape> = [[0.5, 0.0], [0.0, 0.5], [-0.5, 0.0], [0.0, -0.5]]
        .into_iter()
        .map(|c| Shape::Circle { center: c, radius: 0.25 })
        .collect();
    let mut with = ring.clone();
    with.push(Shape::Circle { center: [0.0, 0.0], radius: 0.15 });
    (ConductivitySample::new(with), ConductivitySample::new(ring))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub omega: u32,
    pub relative_difference: f64,
}

/// Relative boundary difference between the blocked-centre conductivity
/// and the one with its centre removed, for patterns `1..=patterns`.
pub fn center_inclusion_study(
    grid: &CartesianGrid,
    with_center: &ConductivitySample,
    without_center: &ConductivitySample,
    patterns: u32,
    cfg: &SolverConfig,
) -> Result<Vec<SensitivityRow>> {
    let dom = SquareDomain::new(grid);
    let op1 = Operator::assemble(&conductivity_on_grid(with_center, grid))?;
    let op2 = Operator::assemble(&conductivity_on_grid(without_center, grid))?;
    (1..=patterns)
        .map(|w| {
            let g = make_current(w, dom.boundary())?;
            let u1 = ntd_on(&dom, &op1, &g, cfg)?;
            let u2 = ntd_on(&dom, &op2, &g, cfg)?;
            Ok(SensitivityRow { omega: w, relative_difference: relative_difference(&u1, &u2)? })
        })
        .collect()
}
