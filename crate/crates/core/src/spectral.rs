//! Fourier calculus on a closed boundary curve parametrized by arc length.
//!
//! A trace is expanded as `v(s) = Σ c_k exp(2πiks/L)` for
//! `|k| ≤ K_f = ⌊M/2⌋ − 1`, `M` being the number of loop points. Loops with
//! non-uniform spacing are first resampled uniformly in arc length by
//! periodic linear interpolation.

use std::cell::RefCell;
use std::f64::consts::TAU;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::dsm::Probing;
use crate::error::{Error, Result};
use crate::field::{BoundaryLoop, BoundaryTrace};
use crate::grid::Point;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let plan = if inverse { p.plan_fft_inverse(buf.len()) } else { p.plan_fft_forward(buf.len()) };
        plan.process(buf);
    });
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySpectrum {
    /// `coefficients[k + cutoff]` holds `c_k`.
    pub coefficients: Vec<Complex64>,
    pub cutoff: usize,
    /// Total arc length `L`.
    pub period: f64,
}

impl BoundarySpectrum {
    pub fn coeff(&self, k: i64) -> Complex64 {
        let idx = k + self.cutoff as i64;
        if idx < 0 || idx as usize >= self.coefficients.len() {
            Complex64::new(0.0, 0.0)
        } else {
            self.coefficients[idx as usize]
        }
    }

    pub fn frequencies(&self) -> impl Iterator<Item = i64> {
        let k = self.cutoff as i64;
        -k..=k
    }

    /// `Σ |c_k|² L`, the squared `L²` norm of the band-limited trace.
    pub fn energy(&self) -> f64 {
        self.coefficients.iter().map(|c| c.norm_sqr()).sum::<f64>() * self.period
    }

    fn wavenumber(&self, k: i64) -> f64 {
        TAU * k as f64 / self.period
    }
}

pub fn cutoff(samples: usize) -> usize {
    (samples / 2).saturating_sub(1)
}

fn uniform_samples(trace: &BoundaryTrace) -> Vec<f64> {
    let lp = &trace.layout;
    if lp.is_uniform() {
        return trace.values.clone();
    }
    let m = lp.len();
    let h = lp.length / m as f64;
    let mut seg = 0;
    (0..m)
        .map(|j| {
            let s = j as f64 * h;
            while seg + 1 < m && lp.arc[seg + 1] <= s {
                seg += 1;
            }
            let (s0, v0) = (lp.arc[seg], trace.values[seg]);
            let (s1, v1) = if seg + 1 < m { (lp.arc[seg + 1], trace.values[seg + 1]) } else { (lp.length, trace.values[0]) };
            v0 + (v1 - v0) * (s - s0) / (s1 - s0)
        })
        .collect()
}

pub fn to_spectrum(trace: &BoundaryTrace) -> BoundarySpectrum {
    let m = trace.len();
    let kf = cutoff(m);
    let mut buf: Vec<Complex64> = uniform_samples(trace).into_iter().map(|v| Complex64::new(v, 0.0)).collect();
    fft(&mut buf, false);
    let scale = 1.0 / m as f64;
    let coefficients = (-(kf as i64)..=kf as i64).map(|k| buf[k.rem_euclid(m as i64) as usize] * scale).collect();
    BoundarySpectrum { coefficients, cutoff: kf, period: trace.layout.length }
}

/// Evaluates the trigonometric polynomial at the points of `layout`.
pub fn from_spectrum(spec: &BoundarySpectrum, layout: &Arc<BoundaryLoop>) -> BoundaryTrace {
    let m = layout.len();
    if layout.is_uniform() && 2 * spec.cutoff < m && (layout.length - spec.period).abs() <= 1e-12 * spec.period {
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for k in spec.frequencies() {
            buf[k.rem_euclid(m as i64) as usize] = spec.coeff(k);
        }
        fft(&mut buf, true);
        return BoundaryTrace { layout: layout.clone(), values: buf.iter().map(|c| c.re).collect() };
    }
    let values = layout
        .arc
        .iter()
        .map(|s| {
            let t = TAU * s / spec.period;
            let mut acc = spec.coeff(0).re;
            for k in 1..=spec.cutoff as i64 {
                let e = Complex64::from_polar(1.0, k as f64 * t);
                acc += 2.0 * (spec.coeff(k) * e).re;
            }
            acc
        })
        .collect();
    BoundaryTrace { layout: layout.clone(), values }
}

/// Multiplies `c_k` by `|2πk/L|^{2γ}`; the mean is removed for `γ > 0` and
/// `γ = 0` is the identity.
pub fn frac_laplacian(trace: &BoundaryTrace, gamma: f64) -> Result<BoundaryTrace> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("fractional order {gamma} must be nonnegative")));
    }
    if gamma == 0.0 {
        return Ok(trace.clone());
    }
    let mut spec = to_spectrum(trace);
    let kf = spec.cutoff as i64;
    for k in -kf..=kf {
        let f = spec.wavenumber(k).abs().powf(2.0 * gamma);
        spec.coefficients[(k + kf) as usize] *= f;
    }
    Ok(from_spectrum(&spec, &trace.layout))
}

/// `⟨(−Δ_∂Ω)^γ eta, data⟩` in `L²(∂Ω)`.
pub fn duality_product(eta: &BoundaryTrace, data: &BoundaryTrace, gamma: f64) -> Result<f64> {
    eta.check_same_loop(data)?;
    frac_laplacian(eta, gamma)?.inner(data)
}

/// `(Σ_{k≠0} |2πk/L|³ |c_k|² L)^{1/2}`.
pub fn seminorm_h32(trace: &BoundaryTrace) -> f64 {
    let spec = to_spectrum(trace);
    spec.frequencies()
        .filter(|k| *k != 0)
        .map(|k| spec.wavenumber(k).abs().powi(3) * spec.coeff(k).norm_sqr() * spec.period)
        .sum::<f64>()
        .sqrt()
}

/// `K(x, y) = ⟨η_{x,dx}, η_{y,dy}⟩_γ / |η_{x,dx}|_{H^{3/2}}`.
pub fn kernel_diagnostic(source: &dyn Probing, x: Point, y: Point, dx: [f64; 2], dy: [f64; 2], gamma: f64) -> Result<f64> {
    let ex = source.probe(x, dx)?;
    let ey = source.probe(y, dy)?;
    let norm = seminorm_h32(&ex);
    if norm == 0.0 {
        return Err(Error::NonFinite("kernel diagnostic: probing trace has zero seminorm".into()));
    }
    Ok(duality_product(&ex, &ey, gamma)? / norm)
}

/// Symmetric normalization of the kernel,
/// `⟨η_x, η_y⟩_γ / (‖η_x‖_γ ‖η_y‖_γ)` with `‖η‖_γ² = ⟨η, η⟩_γ`.
pub fn kernel_cosine(source: &dyn Probing, x: Point, y: Point, dx: [f64; 2], dy: [f64; 2], gamma: f64) -> Result<f64> {
    let ex = source.probe(x, dx)?;
    let ey = source.probe(y, dy)?;
    let nx = duality_product(&ex, &ex, gamma)?;
    let ny = duality_product(&ey, &ey, gamma)?;
    if !(nx > 0.0 && ny > 0.0) {
        return Err(Error::NonFinite("kernel cosine: probing trace has zero norm".into()));
    }
    Ok(duality_product(&ex, &ey, gamma)? / (nx * ny).sqrt())
}
