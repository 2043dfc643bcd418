//! Finite-volume discretization of `−∇·(σ∇u) = f` with Neumann data.
//!
//! Unknowns live on grid nodes; each node owns the dual cell
//! `[x − h1/2, x + h1/2] × [y − h2/2, y + h2/2]` clipped to the rectangle, so
//! edge nodes own half cells and corners quarter cells. A face between two
//! neighbouring nodes carries the transmissibility `σ_face · |face| / h`,
//! where `σ_face` is the harmonic mean of the two nodal conductivities. The
//! resulting matrix is symmetric positive semidefinite with the constants as
//! its null space.
//!
//! Neumann data `g` enters as the boundary load `g_i · w_i`, `w_i` being the
//! trapezoidal weight of boundary node `i`. Systems are solved by conjugate
//! gradients with Jacobi preconditioning after projecting the load onto the
//! range (zero sum); the returned field is shifted to zero grid mean.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::{BoundaryLoop, BoundaryTrace, ScalarField};
use crate::grid::{CartesianGrid, Point};
use crate::spectral;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative residual `‖b − Au‖ / ‖b‖` at which iteration stops.
    pub tolerance: f64,
    /// Iteration cap; `None` means `10·n1·n2`.
    pub max_iterations: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iterations: None }
    }
}

impl SolverConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self { tolerance, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance < 1.0) {
            return Err(Error::invalid(format!("solver tolerance {} not in (0, 1)", self.tolerance)));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        Ok(())
    }
}

/// Assembled five-point operator, stored as face transmissibilities.
#[derive(Debug, Clone)]
pub struct Operator {
    grid: CartesianGrid,
    /// Face `(i, j)–(i+1, j)` at `j·(n1−1) + i`.
    east: Vec<f64>,
    /// Face `(i, j)–(i, j+1)` at `j·n1 + i`.
    north: Vec<f64>,
    diag: Vec<f64>,
}

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

impl Operator {
    /// Operator for nodal conductivity `sigma`, harmonically averaged onto faces.
    pub fn assemble(sigma: &ScalarField) -> Result<Self> {
        let g = &sigma.grid;
        if let Some(v) = sigma.values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("conductivity must be positive and finite, found {v}")));
        }
        let s = &sigma.values;
        let mut east = Vec::with_capacity((g.n1 - 1) * g.n2);
        for j in 0..g.n2 {
            for i in 0..g.n1 - 1 {
                east.push(harmonic(s[g.index(i, j)], s[g.index(i + 1, j)]));
            }
        }
        let mut north = Vec::with_capacity(g.n1 * (g.n2 - 1));
        for j in 0..g.n2 - 1 {
            for i in 0..g.n1 {
                north.push(harmonic(s[g.index(i, j)], s[g.index(i, j + 1)]));
            }
        }
        Self::from_face_conductivities(g.clone(), east, north)
    }

    /// Constant unit conductivity.
    pub fn laplacian(grid: &CartesianGrid) -> Self {
        let east = vec![1.0; (grid.n1 - 1) * grid.n2];
        let north = vec![1.0; grid.n1 * (grid.n2 - 1)];
        Self::from_face_conductivities(grid.clone(), east, north).expect("unit conductivity")
    }

    /// Builds the operator from per-face conductivities (same layout as the
    /// internal `east`/`north` arrays).
    pub fn from_face_conductivities(grid: CartesianGrid, mut east: Vec<f64>, mut north: Vec<f64>) -> Result<Self> {
        let (n1, n2) = (grid.n1, grid.n2);
        if east.len() != (n1 - 1) * n2 || north.len() != n1 * (n2 - 1) {
            return Err(Error::shape("face conductivity arrays do not match the grid"));
        }
        if east.iter().chain(&north).any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("face conductivities must be positive"));
        }
        let (h1, h2) = (grid.h1(), grid.h2());
        for j in 0..n2 {
            let len = if j == 0 || j == n2 - 1 { 0.5 * h2 } else { h2 };
            for i in 0..n1 - 1 {
                east[j * (n1 - 1) + i] *= len / h1;
            }
        }
        for j in 0..n2 - 1 {
            for i in 0..n1 {
                let len = if i == 0 || i == n1 - 1 { 0.5 * h1 } else { h1 };
                north[j * n1 + i] *= len / h2;
            }
        }
        let mut diag = vec![0.0; grid.len()];
        for j in 0..n2 {
            for i in 0..n1 - 1 {
                let t = east[j * (n1 - 1) + i];
                diag[grid.index(i, j)] += t;
                diag[grid.index(i + 1, j)] += t;
            }
        }
        for j in 0..n2 - 1 {
            for i in 0..n1 {
                let t = north[j * n1 + i];
                diag[grid.index(i, j)] += t;
                diag[grid.index(i, j + 1)] += t;
            }
        }
        Ok(Self { grid, east, north, diag })
    }

    pub fn grid(&self) -> &CartesianGrid {
        &self.grid
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// `out = A u`.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let (n1, n2) = (self.grid.n1, self.grid.n2);
        for (o, (d, v)) in out.iter_mut().zip(self.diag.iter().zip(u)) {
            *o = d * v;
        }
        for j in 0..n2 {
            let row = j * n1;
            let faces = &self.east[j * (n1 - 1)..(j + 1) * (n1 - 1)];
            for (i, t) in faces.iter().enumerate() {
                let (a, b) = (row + i, row + i + 1);
                out[a] -= t * u[b];
                out[b] -= t * u[a];
            }
        }
        for j in 0..n2 - 1 {
            let row = j * n1;
            let faces = &self.north[row..row + n1];
            for (i, t) in faces.iter().enumerate() {
                let (a, b) = (row + i, row + n1 + i);
                out[a] -= t * u[b];
                out[b] -= t * u[a];
            }
        }
    }

    pub fn apply_vec(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        self.apply(u, &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn subtract_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `A u = b` in the zero-mean gauge. `b` is first projected onto the
/// zero-sum subspace (the range of `A`).
pub fn solve_load(op: &Operator, load: &[f64], cfg: &SolverConfig) -> Result<(Vec<f64>, SolveStats)> {
    cfg.validate()?;
    let n = op.grid.len();
    if load.len() != n {
        return Err(Error::shape(format!("load has {} entries for {n} nodes", load.len())));
    }
    let mut b = load.to_vec();
    subtract_mean(&mut b);
    let b_norm = dot(&b, &b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, SolveStats { iterations: 0, relative_residual: 0.0 }));
    }
    let max_it = cfg.max_iterations.unwrap_or(10 * n);
    let inv_diag: Vec<f64> = op.diag.iter().map(|d| 1.0 / d).collect();
    let mut r = b;
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut rel = 1.0;
    let mut it = 0;
    while it < max_it {
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        it += 1;
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= cfg.tolerance {
            break;
        }
        for k in 0..n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for k in 0..n {
            p[k] = z[k] + beta * p[k];
        }
    }
    if !rel.is_finite() || rel > cfg.tolerance {
        return Err(Error::NotConverged { iterations: it, residual: rel });
    }
    subtract_mean(&mut x);
    Ok((x, SolveStats { iterations: it, relative_residual: rel }))
}

/// A discretized region together with the closed curve carrying its
/// boundary data.
pub trait Domain: Send + Sync {
    fn grid(&self) -> &CartesianGrid;

    fn boundary(&self) -> &Arc<BoundaryLoop>;

    /// Operator for unit background conductivity.
    fn background_operator(&self) -> &Operator;

    /// Nodal weights whose dot product with a nodal field gives its value at
    /// boundary point `q`.
    fn sampling_weights(&self, q: usize) -> Vec<(usize, f64)>;

    /// Whether `x` is far enough inside to host a dipole (two grid steps).
    fn admits_dipole(&self, x: Point) -> bool;

    /// Load vector `∫ g v_k ds` for Neumann data on the boundary curve.
    fn neumann_load(&self, g: &BoundaryTrace) -> Result<Vec<f64>> {
        self.check_trace(g)?;
        let mut b = vec![0.0; self.grid().len()];
        for (q, (v, w)) in g.values.iter().zip(&g.layout.weights).enumerate() {
            for (k, s) in self.sampling_weights(q) {
                b[k] += v * w * s;
            }
        }
        Ok(b)
    }

    /// Boundary values of a nodal field.
    fn sample(&self, u: &[f64]) -> BoundaryTrace {
        let layout = self.boundary().clone();
        let values = (0..layout.len()).map(|q| self.sampling_weights(q).iter().map(|(k, s)| s * u[*k]).sum()).collect();
        BoundaryTrace { layout, values }
    }

    fn check_trace(&self, g: &BoundaryTrace) -> Result<()> {
        if Arc::ptr_eq(&g.layout, self.boundary()) || *g.layout == **self.boundary() {
            Ok(())
        } else {
            Err(Error::shape("trace does not live on this domain's boundary"))
        }
    }
}

/// The rectangle itself, with data on its boundary nodes.
#[derive(Debug, Clone)]
pub struct SquareDomain {
    grid: CartesianGrid,
    boundary: Arc<BoundaryLoop>,
    laplacian: Operator,
}

impl SquareDomain {
    pub fn new(grid: &CartesianGrid) -> Self {
        Self { grid: grid.clone(), boundary: grid.boundary_loop(), laplacian: Operator::laplacian(grid) }
    }
}

impl Domain for SquareDomain {
    fn grid(&self) -> &CartesianGrid {
        &self.grid
    }

    fn boundary(&self) -> &Arc<BoundaryLoop> {
        &self.boundary
    }

    fn background_operator(&self) -> &Operator {
        &self.laplacian
    }

    fn sampling_weights(&self, q: usize) -> Vec<(usize, f64)> {
        vec![(self.boundary.nodes.as_ref().expect("grid loop")[q], 1.0)]
    }

    fn admits_dipole(&self, x: Point) -> bool {
        self.grid.distance_to_boundary(x) >= 2.0 * self.grid.max_spacing() - 1e-12
    }
}

/// A disk of radius `radius` centred at the origin, immersed in a larger
/// rectangle whose remainder is filled with a nearly insulating material.
///
/// Face conductivities are harmonic means along the segment joining the two
/// nodes, so the circle cuts faces at sub-cell resolution. Boundary data
/// live on `m` equally spaced points of the circle and couple to the grid by
/// bilinear interpolation.
#[derive(Debug, Clone)]
pub struct DiskEmbedding {
    grid: CartesianGrid,
    pub radius: f64,
    pub exterior_sigma: f64,
    boundary: Arc<BoundaryLoop>,
    weights: Vec<Vec<(usize, f64)>>,
    background: Operator,
}

const SEGMENT_SAMPLES: usize = 64;

impl DiskEmbedding {
    pub fn new(grid: &CartesianGrid, radius: f64, circle_points: usize, exterior_sigma: f64) -> Result<Self> {
        if !(radius > 0.0) || !grid.contains([radius, radius]) || !grid.contains([-radius, -radius]) {
            return Err(Error::invalid("disk must fit inside the grid"));
        }
        let boundary = Arc::new(BoundaryLoop::circle([0.0, 0.0], radius, circle_points));
        let weights = boundary
            .points
            .iter()
            .map(|p| {
                let mut w = Vec::with_capacity(4);
                grid.for_bilinear_weights(*p, |k, s| w.push((k, s)));
                w
            })
            .collect();
        let mut disk = Self {
            grid: grid.clone(),
            radius,
            exterior_sigma,
            boundary,
            weights,
            background: Operator::laplacian(grid),
        };
        disk.background = disk.operator(|_| 1.0)?;
        Ok(disk)
    }

    /// Operator for conductivity `sigma` inside the disk.
    pub fn operator(&self, sigma: impl Fn(Point) -> f64) -> Result<Operator> {
        let g = &self.grid;
        let r2 = self.radius * self.radius;
        let face = |a: Point, b: Point| {
            let mut inv = 0.0;
            for s in 0..SEGMENT_SAMPLES {
                let t = (s as f64 + 0.5) / SEGMENT_SAMPLES as f64;
                let p = [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])];
                let v = if p[0] * p[0] + p[1] * p[1] < r2 { sigma(p) } else { self.exterior_sigma };
                inv += 1.0 / v;
            }
            SEGMENT_SAMPLES as f64 / inv
        };
        let mut east = Vec::with_capacity((g.n1 - 1) * g.n2);
        for j in 0..g.n2 {
            for i in 0..g.n1 - 1 {
                east.push(face(g.node(i, j), g.node(i + 1, j)));
            }
        }
        let mut north = Vec::with_capacity(g.n1 * (g.n2 - 1));
        for j in 0..g.n2 - 1 {
            for i in 0..g.n1 {
                north.push(face(g.node(i, j), g.node(i, j + 1)));
            }
        }
        Operator::from_face_conductivities(g.clone(), east, north)
    }
}

impl Domain for DiskEmbedding {
    fn grid(&self) -> &CartesianGrid {
        &self.grid
    }

    fn boundary(&self) -> &Arc<BoundaryLoop> {
        &self.boundary
    }

    fn background_operator(&self) -> &Operator {
        &self.background
    }

    fn sampling_weights(&self, q: usize) -> Vec<(usize, f64)> {
        self.weights[q].clone()
    }

    fn admits_dipole(&self, x: Point) -> bool {
        x[0].hypot(x[1]) <= self.radius - 2.0 * self.grid.max_spacing() + 1e-12
    }
}

/// Tolerance of the discrete compatibility condition, relative to `‖g‖`.
pub const COMPATIBILITY_TOLERANCE: f64 = 1e-8;

fn check_compatible(g: &BoundaryTrace) -> Result<()> {
    let integral = g.integral();
    let limit = COMPATIBILITY_TOLERANCE * g.l2_norm();
    if integral.abs() > limit {
        return Err(Error::IncompatibleNeumann { integral, limit });
    }
    Ok(())
}

/// Neumann solve on an arbitrary domain.
pub fn solve_neumann_on(domain: &dyn Domain, op: &Operator, g: &BoundaryTrace, cfg: &SolverConfig) -> Result<ScalarField> {
    check_compatible(g)?;
    let load = domain.neumann_load(g)?;
    let (u, _) = solve_load(op, &load, cfg)?;
    Ok(ScalarField { grid: domain.grid().clone(), values: u })
}

/// Neumann solve on the rectangle: `−∇·(σ∇u) = 0`, `σ ∂u/∂n = g`.
pub fn solve_neumann(op: &Operator, g: &BoundaryTrace, cfg: &SolverConfig) -> Result<ScalarField> {
    solve_neumann_on(&SquareDomain::new(op.grid()), op, g, cfg)
}

/// Neumann-to-Dirichlet map on an arbitrary domain; the result has zero
/// boundary mean.
pub fn ntd_on(domain: &dyn Domain, op: &Operator, g: &BoundaryTrace, cfg: &SolverConfig) -> Result<BoundaryTrace> {
    let u = solve_neumann_on(domain, op, g, cfg)?;
    Ok(domain.sample(&u.values).project_mean_zero())
}

/// `Λ_σ g` on the rectangle for nodal conductivity `sigma`.
pub fn ntd_apply(sigma: &ScalarField, g: &BoundaryTrace, cfg: &SolverConfig) -> Result<BoundaryTrace> {
    let op = Operator::assemble(sigma)?;
    ntd_on(&SquareDomain::new(&sigma.grid), &op, g, cfg)
}

/// Harmonic field with Neumann data `(−Δ_∂Ω)^γ data`, zero grid mean.
/// `data` is projected to zero boundary mean first.
pub fn solve_phi_on(domain: &dyn Domain, data: &BoundaryTrace, gamma: f64, cfg: &SolverConfig) -> Result<ScalarField> {
    let data = if gamma == 0.0 { data.clone() } else { spectral::frac_laplacian(data, gamma)? };
    let data = data.project_mean_zero();
    solve_neumann_on(domain, domain.background_operator(), &data, cfg)
}

/// [`solve_phi_on`] for the rectangle with `γ = 0`.
pub fn solve_phi(domain: &SquareDomain, data: &BoundaryTrace, cfg: &SolverConfig) -> Result<ScalarField> {
    solve_phi_on(domain, data, 0.0, cfg)
}

/// Discrete `−d·∇δ_x`: two bilinearly spread charges `±1/s` at `x ± (s/2)d`
/// with `s` the larger grid spacing. Its dot product with a nodal field `v`
/// is the divided difference `(v(x + s d/2) − v(x − s d/2)) / s`.
pub fn dipole_load(grid: &CartesianGrid, x: Point, d: [f64; 2]) -> Vec<(usize, f64)> {
    let s = grid.max_spacing();
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(8);
    let mut push = |k: usize, w: f64| {
        if w == 0.0 {
            return;
        }
        match out.iter_mut().find(|(kk, _)| *kk == k) {
            Some(e) => e.1 += w,
            None => out.push((k, w)),
        }
    };
    let plus = [x[0] + 0.5 * s * d[0], x[1] + 0.5 * s * d[1]];
    let minus = [x[0] - 0.5 * s * d[0], x[1] - 0.5 * s * d[1]];
    grid.for_bilinear_weights(plus, |k, w| push(k, w / s));
    grid.for_bilinear_weights(minus, |k, w| push(k, -w / s));
    out
}

fn check_direction(d: [f64; 2]) -> Result<()> {
    if (d[0].hypot(d[1]) - 1.0).abs() > 1e-10 {
        return Err(Error::invalid(format!("probing direction {d:?} is not a unit vector")));
    }
    Ok(())
}

/// Boundary trace of the dipole potential `w_{x,d}` on any domain.
pub fn solve_dipole_on(domain: &dyn Domain, x: Point, d: [f64; 2], cfg: &SolverConfig) -> Result<BoundaryTrace> {
    check_direction(d)?;
    if !domain.admits_dipole(x) {
        return Err(Error::invalid(format!("dipole at {x:?} is closer than two grid steps to the boundary")));
    }
    let mut load = vec![0.0; domain.grid().len()];
    for (k, w) in dipole_load(domain.grid(), x, d) {
        load[k] += w;
    }
    let (w, _) = solve_load(domain.background_operator(), &load, cfg)?;
    Ok(domain.sample(&w).project_mean_zero())
}

/// Dipole trace on the rectangle.
pub fn solve_dipole(domain: &SquareDomain, x: Point, d: [f64; 2], cfg: &SolverConfig) -> Result<BoundaryTrace> {
    solve_dipole_on(domain, x, d, cfg)
}

/// Outward normal derivative of a smooth field at the boundary nodes of
/// the rectangle, from its gradient. A corner has two normals and gets the
/// mean of the two fluxes.
pub fn normal_flux(grid: &CartesianGrid, grad: impl Fn(Point) -> [f64; 2]) -> BoundaryTrace {
    let values = grid
        .boundary_indices()
        .iter()
        .map(|&k| {
            let (i, j) = grid.ij(k);
            let g = grad(grid.node(i, j));
            let sides = [(i == 0, -g[0]), (i + 1 == grid.n1, g[0]), (j == 0, -g[1]), (j + 1 == grid.n2, g[1])];
            let (sum, count) = sides.iter().filter(|s| s.0).fold((0.0, 0.0), |(a, c), s| (a + s.1, c + 1.0));
            sum / count
        })
        .collect();
    BoundaryTrace { layout: grid.boundary_loop(), values }
}

/// Cell-area weighted `L²` distance between the discrete solution for the
/// exact Neumann data of a harmonic `u` (σ ≡ 1) and `u` itself, both taken
/// with zero weighted mean.
pub fn manufactured_error(grid: &CartesianGrid, u: impl Fn(Point) -> f64, grad: impl Fn(Point) -> [f64; 2], cfg: &SolverConfig) -> Result<f64> {
    let g = normal_flux(grid, grad).project_mean_zero();
    let uh = solve_neumann(&Operator::laplacian(grid), &g, cfg)?;
    let area: Vec<f64> = (0..grid.len())
        .map(|k| {
            let (i, j) = grid.ij(k);
            let f = |e: bool| if e { 0.5 } else { 1.0 };
            grid.h1() * grid.h2() * f(i == 0 || i + 1 == grid.n1) * f(j == 0 || j + 1 == grid.n2)
        })
        .collect();
    let total: f64 = area.iter().sum();
    let exact: Vec<f64> = grid.nodes().map(&u).collect();
    let mean = |v: &[f64]| v.iter().zip(&area).map(|(a, w)| a * w).sum::<f64>() / total;
    let (m1, m2) = (mean(&uh.values), mean(&exact));
    Ok(uh.values.iter().zip(&exact).zip(&area).map(|((a, b), w)| w * (a - m1 - b + m2).powi(2)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{conductivity_on_grid, polar_angle, ConductivitySample, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cos_current(grid: &CartesianGrid, w: f64) -> BoundaryTrace {
        BoundaryTrace::from_fn(grid.boundary_loop(), |p| (w * polar_angle(p)).cos()).project_mean_zero()
    }

    #[test]
    fn unit_conductivity_gives_five_point_stencil() {
        let grid = CartesianGrid::square(9).unwrap();
        let op = Operator::laplacian(&grid);
        let mut e = vec![0.0; grid.len()];
        let c = grid.index(4, 4);
        e[c] = 1.0;
        let col = op.apply_vec(&e);
        // integrated form: h² × (4/h², −1/h²)
        assert!((col[c] - 4.0).abs() < 1e-14);
        for nb in [grid.index(3, 4), grid.index(5, 4), grid.index(4, 3), grid.index(4, 5)] {
            assert!((col[nb] + 1.0).abs() < 1e-14);
        }
        assert_eq!(col.iter().filter(|v| **v != 0.0).count(), 5);
    }

    #[test]
    fn constants_are_in_the_null_space() {
        let grid = CartesianGrid::new(12, 9).unwrap();
        let s = ConductivitySample::new(vec![Shape::Circle { center: [0.1, 0.0], radius: 0.4 }]);
        let op = Operator::assemble(&conductivity_on_grid(&s, &grid)).unwrap();
        let out = op.apply_vec(&vec![3.5; grid.len()]);
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn operator_is_symmetric_and_positive_on_mean_zero() {
        let grid = CartesianGrid::new(11, 13).unwrap();
        let s = ConductivitySample::new(vec![Shape::Circle { center: [0.0, 0.2], radius: 0.5 }]);
        let op = Operator::assemble(&conductivity_on_grid(&s, &grid)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let u: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut v: Vec<f64> = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let lhs = dot(&op.apply_vec(&u), &v);
            let rhs = dot(&u, &op.apply_vec(&v));
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
            subtract_mean(&mut v);
            assert!(dot(&op.apply_vec(&v), &v) > 0.0);
        }
    }

    #[test]
    fn rejects_nonpositive_conductivity() {
        let grid = CartesianGrid::square(5).unwrap();
        let mut sigma = ScalarField::from_fn(&grid, |_| 1.0);
        sigma.values[7] = 0.0;
        assert!(Operator::assemble(&sigma).is_err());
    }

    #[test]
    fn zero_data_gives_zero_field_and_linearity_holds() {
        let grid = CartesianGrid::square(17).unwrap();
        let op = Operator::laplacian(&grid);
        let cfg = SolverConfig::default();
        let zero = solve_neumann(&op, &BoundaryTrace::zeros(grid.boundary_loop()), &cfg).unwrap();
        assert!(zero.values.iter().all(|v| *v == 0.0));
        let g = cos_current(&grid, 1.0);
        let u = solve_neumann(&op, &g, &cfg).unwrap();
        let v = solve_neumann(&op, &g.scaled(-1.0), &cfg).unwrap();
        for (a, b) in u.values.iter().zip(&v.values) {
            assert!((a + b).abs() < 1e-9 * u.max_abs());
        }
        assert!(u.mean().abs() < 1e-12);
    }

    #[test]
    fn incompatible_data_is_rejected() {
        let grid = CartesianGrid::square(9).unwrap();
        let g = BoundaryTrace::from_fn(grid.boundary_loop(), |_| 1.0);
        let err = solve_neumann(&Operator::laplacian(&grid), &g, &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, Error::IncompatibleNeumann { .. }));
    }

    #[test]
    fn iteration_budget_is_reported() {
        let grid = CartesianGrid::square(33).unwrap();
        let cfg = SolverConfig { tolerance: 1e-12, max_iterations: Some(3) };
        let err = solve_neumann(&Operator::laplacian(&grid), &cos_current(&grid, 1.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::NotConverged { iterations: 3, .. }));
    }

    #[test]
    fn ntd_is_linear_and_sees_inclusions() {
        let grid = CartesianGrid::square(33).unwrap();
        let cfg = SolverConfig::default();
        let g = cos_current(&grid, 1.0);
        let bg = conductivity_on_grid(&ConductivitySample::background(), &grid);
        let f0 = ntd_apply(&bg, &g, &cfg).unwrap();
        let f0b = ntd_apply(&bg, &g, &cfg).unwrap();
        assert!(f0.sub(&f0b).unwrap().max_abs() <= 1e-10);
        let f2 = ntd_apply(&bg, &g.scaled(2.0), &cfg).unwrap();
        for (a, b) in f2.values.iter().zip(&f0.values) {
            assert!((a - 2.0 * b).abs() < 1e-8);
        }
        let s = ConductivitySample::new(vec![Shape::Circle { center: [0.3, 0.0], radius: 0.3 }]);
        let f = ntd_apply(&conductivity_on_grid(&s, &grid), &g, &cfg).unwrap();
        assert!(f.sub(&f0).unwrap().l2_norm() > 1e-3 * f0.l2_norm());
        assert!(f.mean().abs() < 1e-12);
    }

    #[test]
    fn ntd_map_is_reciprocal() {
        let grid = CartesianGrid::square(25).unwrap();
        let cfg = SolverConfig::with_tolerance(1e-12);
        let s = ConductivitySample::new(vec![Shape::Circle { center: [-0.2, 0.3], radius: 0.35 }]);
        let sigma = conductivity_on_grid(&s, &grid);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lp = grid.boundary_loop();
        for _ in 0..3 {
            let g1 = BoundaryTrace::new(lp.clone(), (0..lp.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
                .project_mean_zero();
            let g2 = BoundaryTrace::new(lp.clone(), (0..lp.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
                .project_mean_zero();
            let a = ntd_apply(&sigma, &g1, &cfg).unwrap().inner(&g2).unwrap();
            let b = g1.inner(&ntd_apply(&sigma, &g2, &cfg).unwrap()).unwrap();
            assert!((a - b).abs() <= 1e-8 * a.abs().max(b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn dipole_is_odd_in_direction() {
        let grid = CartesianGrid::square(25).unwrap();
        let dom = SquareDomain::new(&grid);
        let cfg = SolverConfig::default();
        let d = [0.6, 0.8];
        let a = solve_dipole(&dom, [0.1, -0.2], d, &cfg).unwrap();
        let b = solve_dipole(&dom, [0.1, -0.2], [-0.6, -0.8], &cfg).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x + y).abs() < 1e-9 * a.max_abs());
        }
        assert!(solve_dipole(&dom, [0.95, 0.0], [1.0, 0.0], &cfg).is_err());
        assert!(solve_dipole(&dom, [0.0, 0.0], [1.0, 1.0], &cfg).is_err());
    }

    #[test]
    fn dipole_load_is_a_divided_difference() {
        let grid = CartesianGrid::square(21).unwrap();
        let x = [0.13, -0.27];
        let d = [0.8, -0.6];
        let field = ScalarField::from_fn(&grid, |p| 2.0 * p[0] - 3.0 * p[1] + 0.5);
        let val: f64 = dipole_load(&grid, x, d).iter().map(|(k, w)| w * field.values[*k]).sum();
        assert!((val - (2.0 * d[0] - 3.0 * d[1])).abs() < 1e-12);
    }

    #[test]
    fn corner_flux_is_the_mean_of_both_sides() {
        let grid = CartesianGrid::square(5).unwrap();
        let g = normal_flux(&grid, |_| [1.0, 2.0]);
        // (x_min, y_min): normals (−1,0) and (0,−1)
        assert_eq!(g.values[0], -1.5);
        assert_eq!(g.values[2], -2.0);
        assert_eq!(g.values[4], -0.5);
    }

    #[test]
    fn manufactured_solutions_converge() {
        let cfg = SolverConfig::with_tolerance(1e-12);
        let quad = |n: usize| {
            let g = CartesianGrid::square(n).unwrap();
            manufactured_error(&g, |p| p[0] * p[0] - p[1] * p[1], |p| [2.0 * p[0], -2.0 * p[1]], &cfg).unwrap()
        };
        let smooth = |n: usize| {
            let g = CartesianGrid::square(n).unwrap();
            manufactured_error(&g, |p| p[0].exp() * p[1].sin(), |p| [p[0].exp() * p[1].sin(), p[0].exp() * p[1].cos()], &cfg).unwrap()
        };
        assert!(quad(9) < 1e-9 && quad(17) < 1e-9);
        let order = (smooth(9) / smooth(17)).log2();
        assert!(order > 1.8, "{order}");
    }
}
