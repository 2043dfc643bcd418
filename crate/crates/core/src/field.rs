//! Grid-sampled interior fields and traces on closed boundary curves.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{CartesianGrid, Point};

/// An ordered closed polyline with trapezoidal quadrature weights.
///
/// `arc[i]` is the cumulative arc length from `points[0]`; the closing
/// segment back to `points[0]` is included in `length`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLoop {
    pub points: Vec<Point>,
    pub arc: Vec<f64>,
    pub length: f64,
    pub weights: Vec<f64>,
    /// Grid node behind each loop point, for loops traced along a grid edge.
    pub nodes: Option<Vec<usize>>,
}

impl BoundaryLoop {
    pub fn from_nodes(points: Vec<Point>, nodes: Option<Vec<usize>>) -> Self {
        let n = points.len();
        let seg: Vec<f64> = (0..n)
            .map(|i| {
                let (a, b) = (points[i], points[(i + 1) % n]);
                (b[0] - a[0]).hypot(b[1] - a[1])
            })
            .collect();
        let mut arc = Vec::with_capacity(n);
        let mut s = 0.0;
        for d in &seg {
            arc.push(s);
            s += d;
        }
        let weights = (0..n).map(|i| 0.5 * (seg[(i + n - 1) % n] + seg[i])).collect();
        Self { points, arc, length: s, weights, nodes }
    }

    /// `m` equally spaced points on a circle, starting at angle 0.
    pub fn circle(center: Point, radius: f64, m: usize) -> Self {
        let points = (0..m)
            .map(|k| {
                let t = std::f64::consts::TAU * k as f64 / m as f64;
                [center[0] + radius * t.cos(), center[1] + radius * t.sin()]
            })
            .collect();
        let mut lp = Self::from_nodes(points, None);
        // exact arc length rather than the inscribed polygon's
        lp.length = std::f64::consts::TAU * radius;
        let h = lp.length / m as f64;
        lp.arc = (0..m).map(|k| k as f64 * h).collect();
        lp.weights = vec![h; m];
        lp
    }

    /// Abstract uniform loop of period `length` (no geometry attached).
    pub fn uniform(m: usize, length: f64) -> Self {
        let h = length / m as f64;
        Self {
            points: vec![[0.0, 0.0]; m],
            arc: (0..m).map(|k| k as f64 * h).collect(),
            length,
            weights: vec![h; m],
            nodes: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        let h = self.length / self.len() as f64;
        self.weights.iter().all(|w| (w - h).abs() <= 1e-12 * h)
    }
}

/// Values of a function at the points of a [`BoundaryLoop`].
#[derive(Debug, Clone)]
pub struct BoundaryTrace {
    pub layout: Arc<BoundaryLoop>,
    pub values: Vec<f64>,
}

impl BoundaryTrace {
    pub fn new(layout: Arc<BoundaryLoop>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!("trace has {} values for a loop of {} points", values.len(), layout.len())));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Arc<BoundaryLoop>) -> Self {
        let n = layout.len();
        Self { layout, values: vec![0.0; n] }
    }

    pub fn from_fn(layout: Arc<BoundaryLoop>, f: impl Fn(Point) -> f64) -> Self {
        let values = layout.points.iter().map(|p| f(*p)).collect();
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_loop(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    pub fn check_same_loop(&self, other: &Self) -> Result<()> {
        if self.same_loop(other) {
            Ok(())
        } else {
            Err(Error::shape(format!("traces live on different loops ({} vs {} points)", self.len(), other.len())))
        }
    }

    /// Trapezoidal `∮ v ds`.
    pub fn integral(&self) -> f64 {
        self.values.iter().zip(&self.layout.weights).map(|(v, w)| v * w).sum()
    }

    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.check_same_loop(other)?;
        Ok(self.values.iter().zip(&other.values).zip(&self.layout.weights).map(|((a, b), w)| a * b * w).sum())
    }

    /// `L²(∂Ω)` norm by the trapezoidal rule.
    pub fn l2_norm(&self) -> f64 {
        self.values.iter().zip(&self.layout.weights).map(|(v, w)| v * v * w).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.integral() / self.layout.length
    }

    /// Subtracts the boundary mean so that `∮ v ds = 0`.
    ///
    /// A mean already at rounding level is left alone, which makes the
    /// projection exactly idempotent.
    pub fn project_mean_zero(&self) -> Self {
        let m = self.mean();
        if m.abs() <= 64.0 * f64::EPSILON * self.max_abs() {
            return self.clone();
        }
        Self { layout: self.layout.clone(), values: self.values.iter().map(|v| v - m).collect() }
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self { layout: self.layout.clone(), values: self.values.iter().map(|v| alpha * v).collect() }
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_loop(other)?;
        Ok(Self { layout: self.layout.clone(), values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect() })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: CartesianGrid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: CartesianGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::shape(format!("field has {} values for {} nodes", values.len(), grid.len())));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: CartesianGrid) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: &CartesianGrid, f: impl Fn(Point) -> f64) -> Self {
        Self { grid: grid.clone(), values: grid.nodes().map(f).collect() }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Restriction to the grid's boundary loop.
    pub fn trace(&self) -> BoundaryTrace {
        let layout = self.grid.boundary_loop();
        let values = layout.nodes.as_ref().expect("grid loop").iter().map(|&k| self.values[k]).collect();
        BoundaryTrace { layout, values }
    }
}

/// Gradient-like pair of nodal arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: CartesianGrid,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl VectorField {
    pub fn at(&self, k: usize) -> [f64; 2] {
        [self.dx[k], self.dy[k]]
    }

    pub fn magnitude(&self, k: usize) -> f64 {
        self.dx[k].hypot(self.dy[k])
    }
}

/// Central differences in the interior, second-order one-sided differences
/// on the boundary layer.
pub fn gradient_field(phi: &ScalarField) -> VectorField {
    let g = &phi.grid;
    let (n1, n2) = (g.n1, g.n2);
    let (h1, h2) = (g.h1(), g.h2());
    let v = &phi.values;
    let mut dx = vec![0.0; g.len()];
    let mut dy = vec![0.0; g.len()];
    for j in 0..n2 {
        for i in 0..n1 {
            let k = g.index(i, j);
            dx[k] = if i == 0 {
                (-3.0 * v[k] + 4.0 * v[k + 1] - v[k + 2]) / (2.0 * h1)
            } else if i == n1 - 1 {
                (3.0 * v[k] - 4.0 * v[k - 1] + v[k - 2]) / (2.0 * h1)
            } else {
                (v[k + 1] - v[k - 1]) / (2.0 * h1)
            };
            dy[k] = if j == 0 {
                (-3.0 * v[k] + 4.0 * v[k + n1] - v[k + 2 * n1]) / (2.0 * h2)
            } else if j == n2 - 1 {
                (3.0 * v[k] - 4.0 * v[k - n1] + v[k - 2 * n1]) / (2.0 * h2)
            } else {
                (v[k + n1] - v[k - n1]) / (2.0 * h2)
            };
        }
    }
    VectorField { grid: g.clone(), dx, dy }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_exact_on_linear_and_quadratic() {
        let grid = CartesianGrid::square(17).unwrap();
        let lin = gradient_field(&ScalarField::from_fn(&grid, |p| p[0]));
        assert!(lin.dx.iter().all(|d| (d - 1.0).abs() < 1e-12));
        assert!(lin.dy.iter().all(|d| d.abs() < 1e-12));
        let quad = gradient_field(&ScalarField::from_fn(&grid, |p| p[0] * p[0]));
        for (k, p) in grid.nodes().enumerate() {
            // one-sided second-order stencils are exact on quadratics too
            assert!((quad.dx[k] - 2.0 * p[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_converges_at_second_order() {
        let err = |n: usize| {
            let grid = CartesianGrid::square(n).unwrap();
            let pi = std::f64::consts::PI;
            let g = gradient_field(&ScalarField::from_fn(&grid, |p| (pi * p[0]).sin()));
            grid.nodes().enumerate().map(|(k, p)| (g.dx[k] - pi * (pi * p[0]).cos()).abs()).fold(0.0, f64::max)
        };
        let (e1, e2) = (err(33), err(65));
        let order = (e1 / e2).log2();
        assert!(order >= 1.9, "order {order}");
    }

    #[test]
    fn loop_weights_and_integrals() {
        let grid = CartesianGrid::square(9).unwrap();
        let lp = grid.boundary_loop();
        assert!((lp.length - 8.0).abs() < 1e-12);
        assert!((lp.weights.iter().sum::<f64>() - 8.0).abs() < 1e-12);
        // corner weight is half of each adjacent edge
        assert!((lp.weights[0] - 0.25).abs() < 1e-12);
        let t = BoundaryTrace::from_fn(lp, |p| p[0] + 3.0);
        let z = t.project_mean_zero();
        assert!(z.integral().abs() < 1e-13);
        assert_eq!(z.project_mean_zero().values, z.values);
    }
}
