//! The direct sampling method for a single Cauchy pair.
//!
//! The index at a sampling point `x` is
//! `I(x) = |∇φ(x)| / (‖f − Λ_σ0 g‖ · |η_{x,dx}|_{H^{3/2}})` with
//! `dx = ∇φ(x)/|∇φ(x)|`, where `φ` is harmonic with Neumann data
//! `(−Δ_∂Ω)^γ (f − Λ_σ0 g)` and `η_{x,d}` is the boundary trace of the
//! dipole potential. The field is finally divided by its maximum.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{gradient_field, BoundaryLoop, BoundaryTrace};
use crate::grid::{IndexField, Point};
use crate::solver::{dipole_load, ntd_on, solve_dipole_on, solve_load, solve_phi_on, DiskEmbedding, Domain, SolverConfig};
use crate::spectral::seminorm_h32;

/// A family of probing functions `(x, d) ↦ η_{x,d}`.
pub trait Probing: Send + Sync {
    fn probe(&self, x: Point, d: [f64; 2]) -> Result<BoundaryTrace>;
}

/// Closed-form probing function of a disk centred at the origin,
/// `η_{x,d}(ξ) = (1/π)(ξ − x)·d / |ξ − x|²`.
pub fn probing_trace_disk(x: Point, d: [f64; 2], layout: &Arc<BoundaryLoop>) -> Result<BoundaryTrace> {
    if layout.is_empty() {
        return Err(Error::invalid("empty boundary loop"));
    }
    let radius = layout.length / std::f64::consts::TAU;
    if layout.points.iter().any(|p| (p[0].hypot(p[1]) - radius).abs() > 1e-9 * radius) {
        return Err(Error::invalid("boundary loop is not a circle centred at the origin"));
    }
    let h = layout.length / layout.len() as f64;
    if !(x[0].hypot(x[1]) < radius - 2.0 * h) {
        return Err(Error::invalid(format!("sampling point {x:?} is not inside the disk by two boundary steps")));
    }
    let values = layout
        .points
        .iter()
        .map(|xi| {
            let r = [xi[0] - x[0], xi[1] - x[1]];
            (r[0] * d[0] + r[1] * d[1]) / (std::f64::consts::PI * (r[0] * r[0] + r[1] * r[1]))
        })
        .collect();
    Ok(BoundaryTrace { layout: layout.clone(), values })
}

/// Probing functions computed from the discrete dipole problem.
///
/// Built by reciprocity: for every boundary sampling functional `s_q` the
/// table holds `z_q = A⁺ s_q`, so the trace of the dipole potential at `q`
/// is `b_{x,d} · z_q`. Node-aligned sampling points keep their two axis
/// traces in a cache and combine them linearly in `d`.
pub struct NumericProbing {
    domain: Arc<dyn Domain>,
    table: Vec<Vec<f64>>,
    cache: RwLock<HashMap<usize, Arc<[Vec<f64>; 2]>>>,
}

impl std::fmt::Debug for NumericProbing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NumericProbing").field("points", &self.table.len()).finish()
    }
}

impl NumericProbing {
    pub fn new(domain: Arc<dyn Domain>, cfg: &SolverConfig) -> Result<Self> {
        let n = domain.grid().len();
        let table = (0..domain.boundary().len())
            .into_par_iter()
            .map(|q| {
                let mut load = vec![0.0; n];
                for (k, s) in domain.sampling_weights(q) {
                    load[k] += s;
                }
                solve_load(domain.background_operator(), &load, cfg).map(|(z, _)| z)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { domain, table, cache: RwLock::new(HashMap::new()) })
    }

    pub fn domain(&self) -> &Arc<dyn Domain> {
        &self.domain
    }

    fn raw_trace(&self, load: &[(usize, f64)]) -> Vec<f64> {
        self.table.iter().map(|z| load.iter().map(|(k, w)| w * z[*k]).sum()).collect()
    }

    fn axis_traces(&self, node: usize) -> Arc<[Vec<f64>; 2]> {
        if let Some(t) = self.cache.read().expect("probing cache").get(&node) {
            return t.clone();
        }
        let grid = self.domain.grid();
        let x = grid.node_at(node);
        let t = Arc::new([self.raw_trace(&dipole_load(grid, x, [1.0, 0.0])), self.raw_trace(&dipole_load(grid, x, [0.0, 1.0]))]);
        self.cache.write().expect("probing cache").entry(node).or_insert(t).clone()
    }

    fn node_of(&self, x: Point) -> Option<usize> {
        let g = self.domain.grid();
        let fi = (x[0] - g.x_min) / g.h1();
        let fj = (x[1] - g.y_min) / g.h2();
        let (i, j) = (fi.round(), fj.round());
        let aligned = (fi - i).abs() < 1e-9 && (fj - j).abs() < 1e-9;
        (aligned && i >= 0.0 && j >= 0.0 && (i as usize) < g.n1 && (j as usize) < g.n2).then(|| g.index(i as usize, j as usize))
    }
}

impl Probing for NumericProbing {
    fn probe(&self, x: Point, d: [f64; 2]) -> Result<BoundaryTrace> {
        if (d[0].hypot(d[1]) - 1.0).abs() > 1e-10 {
            return Err(Error::invalid(format!("probing direction {d:?} is not a unit vector")));
        }
        if !self.domain.admits_dipole(x) {
            return Err(Error::invalid(format!("dipole at {x:?} is closer than two grid steps to the boundary")));
        }
        let values = match self.node_of(x) {
            Some(k) => {
                let t = self.axis_traces(k);
                t[0].iter().zip(&t[1]).map(|(a, b)| d[0] * a + d[1] * b).collect()
            }
            None => self.raw_trace(&dipole_load(self.domain.grid(), x, d)),
        };
        Ok(BoundaryTrace { layout: self.domain.boundary().clone(), values }.project_mean_zero())
    }
}

pub enum ProbingSource {
    ExplicitDisk(Arc<BoundaryLoop>),
    NumericDipole(NumericProbing),
}

impl Probing for ProbingSource {
    fn probe(&self, x: Point, d: [f64; 2]) -> Result<BoundaryTrace> {
        match self {
            ProbingSource::ExplicitDisk(lp) => probing_trace_disk(x, d, lp),
            ProbingSource::NumericDipole(p) => p.probe(x, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassicIndex {
    pub field: IndexField,
    /// Set when `‖f − Λ_σ0 g‖` vanished and the field is identically zero.
    pub zero_contrast: bool,
}

pub const ZERO_CONTRAST: f64 = 1e-12;
pub const ZERO_GRADIENT: f64 = 1e-14;

/// Classic index field on `domain` from one Cauchy pair `(g, f)` with
/// constant background conductivity `sigma0`.
#[allow(clippy::too_many_arguments)]
pub fn index_field_classic(
    domain: &dyn Domain,
    f: &BoundaryTrace,
    g: &BoundaryTrace,
    sigma0: f64,
    gamma: f64,
    source: &dyn Probing,
    cfg: &SolverConfig,
) -> Result<ClassicIndex> {
    if !(sigma0 > 0.0) {
        return Err(Error::invalid("background conductivity must be positive"));
    }
    domain.check_trace(f)?;
    let lambda = ntd_on(domain, domain.background_operator(), g, cfg)?.scaled(1.0 / sigma0);
    let diff = f.project_mean_zero().sub(&lambda)?;
    let norm = diff.l2_norm();
    let grid = domain.grid().clone();
    if norm < ZERO_CONTRAST {
        return Ok(ClassicIndex { field: IndexField::zeros(grid), zero_contrast: true });
    }
    let phi = solve_phi_on(domain, &diff, gamma, cfg)?;
    let grad = gradient_field(&phi);
    let raw = (0..grid.len())
        .into_par_iter()
        .map(|k| {
            let x = grid.node_at(k);
            let m = grad.magnitude(k);
            if m < ZERO_GRADIENT || !domain.admits_dipole(x) {
                return Ok(0.0);
            }
            let d = [grad.dx[k] / m, grad.dy[k] / m];
            let eta = source.probe(x, d)?;
            let s = seminorm_h32(&eta);
            Ok(if s > 0.0 { m / (norm * s) } else { 0.0 })
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    let values: Vec<f64> = if max > 0.0 { raw.iter().map(|v| (v / max).max(0.0)).collect() } else { raw };
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classic index".into()));
    }
    Ok(ClassicIndex { field: IndexField::from_clamped(grid, values), zero_contrast: false })
}

/// Relative `L²` distance between the closed-form and the discrete dipole
/// trace on the disk configuration.
pub fn probing_agreement(disk: &DiskEmbedding, x: Point, d: [f64; 2], cfg: &SolverConfig) -> Result<f64> {
    let explicit = probing_trace_disk(x, d, disk.boundary())?.project_mean_zero();
    let numeric = solve_dipole_on(disk, x, d, cfg)?;
    Ok(numeric.sub(&explicit)?.l2_norm() / explicit.l2_norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CartesianGrid;
    use crate::solver::SquareDomain;
    use std::f64::consts::PI;

    #[test]
    fn disk_formula_examples() {
        let lp = Arc::new(BoundaryLoop::circle([0.0, 0.0], 1.0, 64));
        let e1 = probing_trace_disk([0.0, 0.0], [1.0, 0.0], &lp).unwrap();
        let e2 = probing_trace_disk([0.0, 0.0], [0.0, 1.0], &lp).unwrap();
        for (k, p) in lp.points.iter().enumerate() {
            assert!((e1.values[k] - p[0] / PI).abs() < 1e-15);
            assert!((e2.values[k] - p[1] / PI).abs() < 1e-15);
        }
        let a = probing_trace_disk([0.2, -0.1], [0.6, 0.8], &lp).unwrap();
        let b = probing_trace_disk([0.2, -0.1], [-0.6, -0.8], &lp).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| x == &-y));
        assert!(probing_trace_disk([0.97, 0.0], [1.0, 0.0], &lp).is_err());
        let square = CartesianGrid::square(9).unwrap().boundary_loop();
        assert!(probing_trace_disk([0.0, 0.0], [1.0, 0.0], &square).is_err());
    }

    #[test]
    fn reciprocity_table_matches_direct_dipole_solves() {
        let grid = CartesianGrid::square(21).unwrap();
        let dom = Arc::new(SquareDomain::new(&grid));
        let cfg = SolverConfig::with_tolerance(1e-12);
        let table = NumericProbing::new(dom.clone(), &cfg).unwrap();
        // off-node point exercises the sparse load path
        for (x, d) in [([0.1, 0.2], [1.0, 0.0]), ([-0.33, 0.17], [0.6, -0.8])] {
            let a = table.probe(x, d).unwrap();
            let b = solve_dipole_on(dom.as_ref(), x, d, &cfg).unwrap();
            assert!(a.sub(&b).unwrap().l2_norm() <= 1e-8 * b.l2_norm());
        }
        // node-aligned axis directions coincide with the direct solve
        let x = grid.node(7, 12);
        let a = table.probe(x, [0.0, 1.0]).unwrap();
        let b = solve_dipole_on(dom.as_ref(), x, [0.0, 1.0], &cfg).unwrap();
        assert!(a.sub(&b).unwrap().l2_norm() <= 1e-8 * b.l2_norm());
        let again = table.probe(x, [0.0, 1.0]).unwrap();
        assert_eq!(a.values, again.values);
    }
}
