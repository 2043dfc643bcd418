//! Computational domain, inclusion geometry and ground-truth fields.
//!
//! The default domain is the square `[-1, 1]²` sampled by an `n1 × n2`
//! lattice of nodes. Node `(i, j)` sits at `(x_min + i·h1, y_min + j·h2)` and
//! is stored at flat index `j·n1 + i`, so rows run along `x1` and row 0 is the
//! bottom edge.
//!
//! Inclusions are unions of simple shapes. Every shape exposes a level-set
//! function that is negative inside, positive outside and zero on the curve;
//! the union uses the pointwise minimum.

use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{BoundaryLoop, ScalarField};

pub type Point = [f64; 2];

/// Closest any sampled shape may come to the square boundary.
pub const BOUNDARY_MARGIN: f64 = 0.1;

/// Rejection attempts allowed per shape before `sample_scenario` gives up.
pub const MAX_SHAPE_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartesianGrid {
    pub n1: usize,
    pub n2: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl CartesianGrid {
    /// Grid on the default square `[-1, 1]²`.
    pub fn new(n1: usize, n2: usize) -> Result<Self> {
        Self::with_bounds(n1, n2, [-1.0, 1.0], [-1.0, 1.0])
    }

    pub fn square(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn with_bounds(n1: usize, n2: usize, x: [f64; 2], y: [f64; 2]) -> Result<Self> {
        if n1 < 3 || n2 < 3 {
            return Err(Error::invalid(format!("grid needs at least 3×3 nodes, got {n1}×{n2}")));
        }
        if !(x[1] > x[0]) || !(y[1] > y[0]) {
            return Err(Error::invalid("grid bounds must be increasing"));
        }
        Ok(Self { n1, n2, x_min: x[0], x_max: x[1], y_min: y[0], y_max: y[1] })
    }

    pub fn h1(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n1 - 1) as f64
    }

    pub fn h2(&self) -> f64 {
        (self.y_max - self.y_min) / (self.n2 - 1) as f64
    }

    pub fn max_spacing(&self) -> f64 {
        self.h1().max(self.h2())
    }

    /// Node count `K = n1·n2`.
    pub fn len(&self) -> usize {
        self.n1 * self.n2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.n1 + i
    }

    #[inline]
    pub fn ij(&self, k: usize) -> (usize, usize) {
        (k % self.n1, k / self.n1)
    }

    #[inline]
    pub fn node(&self, i: usize, j: usize) -> Point {
        [self.x_min + i as f64 * self.h1(), self.y_min + j as f64 * self.h2()]
    }

    pub fn node_at(&self, k: usize) -> Point {
        let (i, j) = self.ij(k);
        self.node(i, j)
    }

    pub fn nodes(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |k| self.node_at(k))
    }

    pub fn is_boundary(&self, i: usize, j: usize) -> bool {
        i == 0 || j == 0 || i + 1 == self.n1 || j + 1 == self.n2
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.x_min && p[0] <= self.x_max && p[1] >= self.y_min && p[1] <= self.y_max
    }

    /// Distance from `p` to the rectangle boundary (negative outside).
    pub fn distance_to_boundary(&self, p: Point) -> f64 {
        (p[0] - self.x_min).min(self.x_max - p[0]).min(p[1] - self.y_min).min(self.y_max - p[1])
    }

    /// Count of boundary nodes, `2(n1 + n2) − 4`.
    pub fn boundary_len(&self) -> usize {
        2 * (self.n1 + self.n2) - 4
    }

    /// Flat node indices of the boundary, counter-clockwise from the
    /// corner `(x_min, y_min)`.
    pub fn boundary_indices(&self) -> Vec<usize> {
        let (n1, n2) = (self.n1, self.n2);
        let mut out = Vec::with_capacity(self.boundary_len());
        out.extend((0..n1).map(|i| self.index(i, 0)));
        out.extend((1..n2).map(|j| self.index(n1 - 1, j)));
        out.extend((0..n1 - 1).rev().map(|i| self.index(i, n2 - 1)));
        out.extend((1..n2 - 1).rev().map(|j| self.index(0, j)));
        out
    }

    pub fn boundary_loop(&self) -> Arc<BoundaryLoop> {
        let idx = self.boundary_indices();
        let points = idx.iter().map(|&k| self.node_at(k)).collect();
        Arc::new(BoundaryLoop::from_nodes(points, Some(idx)))
    }

    /// Bilinear interpolation of nodal values at `p`; `p` is clamped into the grid.
    pub fn interpolate(&self, values: &[f64], p: Point) -> f64 {
        let mut acc = 0.0;
        self.for_bilinear_weights(p, |k, w| acc += w * values[k]);
        acc
    }

    /// Calls `f(node, weight)` for the (up to four) nodes surrounding `p`.
    pub fn for_bilinear_weights(&self, p: Point, mut f: impl FnMut(usize, f64)) {
        let fx = ((p[0] - self.x_min) / self.h1()).clamp(0.0, (self.n1 - 1) as f64);
        let fy = ((p[1] - self.y_min) / self.h2()).clamp(0.0, (self.n2 - 1) as f64);
        let i0 = (fx.floor() as usize).min(self.n1 - 2);
        let j0 = (fy.floor() as usize).min(self.n2 - 2);
        let tx = fx - i0 as f64;
        let ty = fy - j0 as f64;
        f(self.index(i0, j0), (1.0 - tx) * (1.0 - ty));
        f(self.index(i0 + 1, j0), tx * (1.0 - ty));
        f(self.index(i0, j0 + 1), (1.0 - tx) * ty);
        f(self.index(i0 + 1, j0 + 1), tx * ty);
    }
}

/// A single inclusion component.
///
/// `Circle` and `Ellipse` are the training library; `Polygon` and
/// `RectAnnulus` exist for out-of-library probes (triangles, bars, annuli).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Circle { center: Point, radius: f64 },
    Ellipse { center: Point, semi_major: f64, semi_minor: f64, rotation: f64 },
    /// Simple polygon, vertices in either orientation.
    Polygon { vertices: Vec<Point> },
    /// Axis-aligned rectangular ring given by outer and inner half-widths.
    RectAnnulus { center: Point, outer: [f64; 2], inner: [f64; 2] },
}

impl Shape {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Circle { radius, .. } => *radius > 0.0,
            Shape::Ellipse { semi_major, semi_minor, rotation, .. } => {
                *semi_major > 0.0 && *semi_minor > 0.0 && (0.0..TAU).contains(rotation)
            }
            Shape::Polygon { vertices } => vertices.len() >= 3,
            Shape::RectAnnulus { outer, inner, .. } => {
                inner[0] > 0.0 && inner[1] > 0.0 && outer[0] > inner[0] && outer[1] > inner[1]
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate shape {self:?}")))
        }
    }

    /// Signed level-set value at `x`: negative inside, zero on the curve.
    ///
    /// Circles use the exact signed distance. Ellipses use the radial
    /// distance `|u| − r(u)` in the shape frame, where `r(u)` is the centre to
    /// boundary distance along `u`; it is exact on the axes and coincides with
    /// the circle formula when both semi-axes agree.
    pub fn level_set(&self, x: Point) -> f64 {
        match self {
            Shape::Circle { center, radius } => dist(x, *center) - radius,
            Shape::Ellipse { center, semi_major, semi_minor, rotation } => {
                let (s, c) = rotation.sin_cos();
                let dx = x[0] - center[0];
                let dy = x[1] - center[1];
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let r_norm = ((u / semi_major).powi(2) + (v / semi_minor).powi(2)).sqrt();
                if r_norm == 0.0 {
                    return -semi_minor;
                }
                let r = u.hypot(v);
                r - r / r_norm
            }
            Shape::Polygon { vertices } => polygon_signed_distance(vertices, x),
            Shape::RectAnnulus { center, outer, inner } => {
                let p = [x[0] - center[0], x[1] - center[1]];
                box_signed_distance(p, *outer).max(-box_signed_distance(p, *inner))
            }
        }
    }

    /// Axis-aligned half extents `(ex, ey)` about the centre.
    fn half_extent(&self) -> (Point, [f64; 2]) {
        match self {
            Shape::Circle { center, radius } => (*center, [*radius, *radius]),
            Shape::Ellipse { center, semi_major, semi_minor, rotation } => {
                let (s, c) = rotation.sin_cos();
                let ex = ((semi_major * c).powi(2) + (semi_minor * s).powi(2)).sqrt();
                let ey = ((semi_major * s).powi(2) + (semi_minor * c).powi(2)).sqrt();
                (*center, [ex, ey])
            }
            Shape::Polygon { vertices } => {
                let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
                for v in vertices {
                    for a in 0..2 {
                        lo[a] = lo[a].min(v[a]);
                        hi[a] = hi[a].max(v[a]);
                    }
                }
                (
                    [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0],
                    [(hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0],
                )
            }
            Shape::RectAnnulus { center, outer, .. } => (*center, *outer),
        }
    }

    /// True when the shape's bounding box lies inside `[-limit, limit]²`.
    pub fn within_box(&self, limit: f64) -> bool {
        let (c, e) = self.half_extent();
        c[0] - e[0] >= -limit && c[0] + e[0] <= limit && c[1] - e[1] >= -limit && c[1] + e[1] <= limit
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn box_signed_distance(p: Point, half: [f64; 2]) -> f64 {
    let qx = p[0].abs() - half[0];
    let qy = p[1].abs() - half[1];
    let outside = qx.max(0.0).hypot(qy.max(0.0));
    outside + qx.max(qy).min(0.0)
}

fn polygon_signed_distance(vertices: &[Point], p: Point) -> f64 {
    let n = vertices.len();
    let mut best = f64::INFINITY;
    let mut inside = false;
    for k in 0..n {
        let a = vertices[k];
        let b = vertices[(k + 1) % n];
        let e = [b[0] - a[0], b[1] - a[1]];
        let w = [p[0] - a[0], p[1] - a[1]];
        let t = ((w[0] * e[0] + w[1] * e[1]) / (e[0] * e[0] + e[1] * e[1])).clamp(0.0, 1.0);
        best = best.min(dist(p, [a[0] + t * e[0], a[1] + t * e[1]]));
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * e[0];
            if p[0] < x_cross {
                inside = !inside;
            }
        }
    }
    if inside {
        -best
    } else {
        best
    }
}

/// Inclusion geometry together with the two conductivity levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConductivitySample {
    pub shapes: Vec<Shape>,
    pub sigma_inclusion: f64,
    pub sigma_background: f64,
}

impl ConductivitySample {
    pub fn new(shapes: Vec<Shape>) -> Self {
        Self { shapes, sigma_inclusion: 10.0, sigma_background: 1.0 }
    }

    /// The homogeneous background, used for calibration and null tests.
    pub fn background() -> Self {
        Self::new(Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_inclusion > 0.0) || !(self.sigma_background > 0.0) {
            return Err(Error::invalid("conductivities must be strictly positive"));
        }
        self.shapes.iter().try_for_each(Shape::validate)
    }

    /// Minimum of the component level sets; negative iff `x` lies in some shape.
    pub fn union_level_set(&self, x: Point) -> Result<f64> {
        if self.shapes.is_empty() {
            return Err(Error::invalid("union level set of an empty shape list"));
        }
        Ok(self.shapes.iter().map(|s| s.level_set(x)).fold(f64::INFINITY, f64::min))
    }

    pub fn is_inside(&self, x: Point) -> bool {
        self.shapes.iter().any(|s| s.level_set(x) < 0.0)
    }

    pub fn sigma_at(&self, x: Point) -> f64 {
        if self.is_inside(x) {
            self.sigma_inclusion
        } else {
            self.sigma_background
        }
    }
}

/// Random inclusion families used for training and testing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Three circles, radius ~ U(0.2, 0.4).
    ThreeCircles = 1,
    /// Five circles, radius ~ U(0.2, 0.3).
    FiveCircles = 2,
    /// Four ellipses, semi-minor ~ U(0.1, 0.2), semi-major ~ U(0.2, 0.4).
    FourEllipses = 3,
}

impl Scenario {
    pub fn from_index(k: u32) -> Result<Self> {
        match k {
            1 => Ok(Scenario::ThreeCircles),
            2 => Ok(Scenario::FiveCircles),
            3 => Ok(Scenario::FourEllipses),
            _ => Err(Error::invalid(format!("scenario must be 1, 2 or 3, got {k}"))),
        }
    }

    pub fn index(self) -> u32 {
        self as u32
    }
}

/// Draws one inclusion sample. Centres are uniform on `(-0.9, 0.9)²`; a shape
/// whose bounding box leaves that square is redrawn.
pub fn sample_scenario<R: Rng + ?Sized>(scenario: Scenario, rng: &mut R) -> Result<ConductivitySample> {
    let limit = 1.0 - BOUNDARY_MARGIN;
    let (count, draw): (usize, fn(&mut R, Point) -> Shape) = match scenario {
        Scenario::ThreeCircles => (3, |rng, center| Shape::Circle { center, radius: rng.random_range(0.2..0.4) }),
        Scenario::FiveCircles => (5, |rng, center| Shape::Circle { center, radius: rng.random_range(0.2..0.3) }),
        Scenario::FourEllipses => (4, |rng, center| Shape::Ellipse {
            center,
            semi_minor: rng.random_range(0.1..0.2),
            semi_major: rng.random_range(0.2..0.4),
            rotation: rng.random_range(0.0..TAU),
        }),
    };
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > MAX_SHAPE_ATTEMPTS {
                return Err(Error::SamplingExhausted(MAX_SHAPE_ATTEMPTS));
            }
            let center = [rng.random_range(-limit..limit), rng.random_range(-limit..limit)];
            let shape = draw(rng, center);
            if shape.within_box(limit) {
                shapes.push(shape);
                break;
            }
        }
    }
    Ok(ConductivitySample::new(shapes))
}

/// Nodal values in `[0, 1]`; ground truth fields are exactly `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexField {
    pub grid: CartesianGrid,
    pub values: Vec<f64>,
}

impl IndexField {
    pub fn new(grid: CartesianGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(format!("index field has {} values for {} nodes", values.len(), grid.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("index value {v} outside [0, 1]")));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: CartesianGrid) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }

    /// Clamps arbitrary real values into `[0, 1]`.
    pub fn from_clamped(grid: CartesianGrid, values: impl IntoIterator<Item = f64>) -> Self {
        let values = values.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self { grid, values }
    }

    pub fn mask(&self, threshold: f64) -> Vec<bool> {
        self.values.iter().map(|&v| v >= threshold).collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = k;
            }
        }
        best
    }
}

pub fn ground_truth_index(sample: &ConductivitySample, grid: &CartesianGrid) -> IndexField {
    let values = grid.nodes().map(|x| if sample.is_inside(x) { 1.0 } else { 0.0 }).collect();
    IndexField { grid: grid.clone(), values }
}

/// Nodal conductivity; the solver averages it harmonically onto faces.
pub fn conductivity_on_grid(sample: &ConductivitySample, grid: &CartesianGrid) -> ScalarField {
    let values = grid.nodes().map(|x| sample.sigma_at(x)).collect();
    ScalarField { grid: grid.clone(), values }
}

/// Polar angle in `[0, 2π)`.
pub fn polar_angle(p: Point) -> f64 {
    let t = p[1].atan2(p[0]);
    if t < 0.0 {
        t + 2.0 * PI
    } else {
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn circle_level_set_convention() {
        let c = Shape::Circle { center: [0.0, 0.0], radius: 0.5 };
        assert_eq!(c.level_set([0.0, 0.0]), -0.5);
        assert_eq!(c.level_set([1.0, 0.0]), 0.5);
    }

    #[test]
    fn ellipse_vertex_is_on_curve() {
        let e = Shape::Ellipse { center: [0.0, 0.0], semi_major: 0.4, semi_minor: 0.2, rotation: 0.0 };
        assert!(e.level_set([0.4, 0.0]).abs() < 1e-15);
        assert!(e.level_set([0.0, 0.2]).abs() < 1e-15);
        assert!(e.level_set([0.0, 0.0]) < 0.0);
        assert!(e.level_set([0.0, 0.25]) > 0.0);
    }

    #[test]
    fn ellipse_half_turn_symmetry() {
        let a = Shape::Ellipse { center: [0.1, -0.2], semi_major: 0.35, semi_minor: 0.15, rotation: 0.7 };
        let b = Shape::Ellipse { center: [0.1, -0.2], semi_major: 0.35, semi_minor: 0.15, rotation: 0.7 + PI };
        for p in [[0.3, 0.1], [-0.2, -0.4], [0.1, -0.2], [0.5, 0.5]] {
            assert!((a.level_set(p) - b.level_set(p)).abs() < 1e-12);
        }
    }

    #[test]
    fn union_takes_minimum() {
        let s = ConductivitySample::new(vec![
            Shape::Circle { center: [-0.5, 0.0], radius: 0.2 },
            Shape::Circle { center: [0.5, 0.0], radius: 0.2 },
        ]);
        assert!((s.union_level_set([-0.5, 0.0]).unwrap() + 0.2).abs() < 1e-15);
        let outside = s.union_level_set([0.0, 0.0]).unwrap();
        assert!((outside - 0.3).abs() < 1e-15);

        let overlap = ConductivitySample::new(vec![
            Shape::Circle { center: [0.0, 0.0], radius: 0.3 },
            Shape::Circle { center: [0.1, 0.0], radius: 0.3 },
        ]);
        let v = overlap.union_level_set([0.05, 0.0]).unwrap();
        assert!((v + 0.25).abs() < 1e-15);
        assert!(ConductivitySample::background().union_level_set([0.0, 0.0]).is_err());
    }

    #[test]
    fn polygon_and_annulus_signs() {
        let tri = Shape::Polygon { vertices: vec![[-0.5, -0.4], [0.5, -0.4], [0.0, 0.5]] };
        assert!(tri.level_set([0.0, 0.0]) < 0.0);
        assert!(tri.level_set([0.8, 0.8]) > 0.0);
        assert!(tri.level_set([0.0, -0.4]).abs() < 1e-15);
        let ring = Shape::RectAnnulus { center: [0.0, 0.0], outer: [0.5, 0.5], inner: [0.3, 0.3] };
        assert!(ring.level_set([0.0, 0.0]) > 0.0);
        assert!(ring.level_set([0.4, 0.0]) < 0.0);
        assert!(ring.level_set([0.7, 0.0]) > 0.0);
    }

    #[test]
    fn scenarios_respect_their_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let s = sample_scenario(Scenario::ThreeCircles, &mut rng).unwrap();
            assert_eq!(s.shapes.len(), 3);
            for sh in &s.shapes {
                let Shape::Circle { radius, .. } = sh else { panic!() };
                assert!((0.2..=0.4).contains(radius));
                assert!(sh.within_box(0.9));
            }
            let s = sample_scenario(Scenario::FiveCircles, &mut rng).unwrap();
            assert_eq!(s.shapes.len(), 5);
            let s = sample_scenario(Scenario::FourEllipses, &mut rng).unwrap();
            assert_eq!(s.shapes.len(), 4);
            for sh in &s.shapes {
                let Shape::Ellipse { semi_major, semi_minor, rotation, .. } = sh else { panic!() };
                assert!((0.2..=0.4).contains(semi_major));
                assert!((0.1..=0.2).contains(semi_minor));
                assert!((0.0..TAU).contains(rotation));
                assert!(sh.within_box(0.9));
            }
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let a = sample_scenario(Scenario::FourEllipses, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_scenario(Scenario::FourEllipses, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truth_and_conductivity_fields() {
        let grid = CartesianGrid::square(33).unwrap();
        let s = ConductivitySample::new(vec![Shape::Circle { center: [0.25, 0.25], radius: 0.3 }]);
        let truth = ground_truth_index(&s, &grid);
        // (0.25, 0.25) is node (20, 20) on a 33-node grid with h = 1/16.
        assert_eq!(truth.values[grid.index(20, 20)], 1.0);
        assert_eq!(truth.values[grid.index(0, 0)], 0.0);
        assert!(truth.values.iter().all(|v| *v == 0.0 || *v == 1.0));
        let sigma = conductivity_on_grid(&s, &grid);
        assert_eq!(sigma.values[grid.index(20, 20)], 10.0);
        assert_eq!(sigma.values[grid.index(0, 0)], 1.0);
        let bg = conductivity_on_grid(&ConductivitySample::background(), &grid);
        assert!(bg.values.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn boundary_traversal_is_a_closed_ccw_loop() {
        let grid = CartesianGrid::new(5, 4).unwrap();
        let idx = grid.boundary_indices();
        assert_eq!(idx.len(), grid.boundary_len());
        assert_eq!(idx[0], grid.index(0, 0));
        assert_eq!(idx[1], grid.index(1, 0));
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len());
        // consecutive nodes (including the wrap) are lattice neighbours
        for w in 0..idx.len() {
            let (a, b) = (grid.ij(idx[w]), grid.ij(idx[(w + 1) % idx.len()]));
            assert_eq!(a.0.abs_diff(b.0) + a.1.abs_diff(b.1), 1);
        }
    }

    #[test]
    fn rejects_small_grids() {
        assert!(CartesianGrid::new(2, 10).is_err());
    }
}
