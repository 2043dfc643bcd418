use crate::error::{Error, Result};

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, k: usize) -> usize {
        self.shape[k]
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::shape(format!("expected a rank-4 tensor, got {:?}", self.shape))),
        }
    }

    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op.to_string()))
        }
    }
}

/// `c = beta·c + a·b` for row-major `a` (`m×k`, or `k×m` when `ta`) and `b`
/// (`k×n`, or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe arrays of the asserted sizes.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

/// Geometry of a 2D convolution window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Output columns `j` whose tap `q` lands inside the image.
    fn valid_columns(&self, q: usize) -> std::ops::Range<usize> {
        let wo = self.out_width();
        let lo = (self.pad.saturating_sub(q)).div_ceil(self.stride);
        // largest j with j·s + q − pad ≤ width − 1
        let hi = if self.width + self.pad > q { ((self.width + self.pad - q - 1) / self.stride + 1).min(wo) } else { 0 };
        lo.min(hi)..hi
    }

    /// Rows `c·k² + p·k + q`, columns `i·Wo + j`.
    pub fn im2col(&self, x: &[f64], col: &mut [f64]) {
        let (ho, wo, k, s) = (self.out_height(), self.out_width(), self.kernel, self.stride);
        let cols = ho * wo;
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for p in 0..k {
                for q in 0..k {
                    let row = &mut col[((c * k + p) * k + q) * cols..((c * k + p) * k + q + 1) * cols];
                    let js = self.valid_columns(q);
                    for i in 0..ho {
                        let y = (i * s + p) as isize - self.pad as isize;
                        let dst = &mut row[i * wo..(i + 1) * wo];
                        if y < 0 || y >= self.height as isize || js.is_empty() {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[y as usize * self.width..(y as usize + 1) * self.width];
                        dst[..js.start].fill(0.0);
                        dst[js.end..].fill(0.0);
                        let x0 = js.start * s + q - self.pad;
                        if s == 1 {
                            dst[js.clone()].copy_from_slice(&src[x0..x0 + js.len()]);
                        } else {
                            for (d, xx) in dst[js.clone()].iter_mut().zip((x0..).step_by(s)) {
                                *d = src[xx];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates into `x`.
    pub fn col2im(&self, col: &[f64], x: &mut [f64]) {
        let (ho, wo, k, s) = (self.out_height(), self.out_width(), self.kernel, self.stride);
        let cols = ho * wo;
        for c in 0..self.channels {
            let plane = &mut x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for p in 0..k {
                for q in 0..k {
                    let row = &col[((c * k + p) * k + q) * cols..((c * k + p) * k + q + 1) * cols];
                    let js = self.valid_columns(q);
                    if js.is_empty() {
                        continue;
                    }
                    let x0 = js.start * s + q - self.pad;
                    for i in 0..ho {
                        let y = (i * s + p) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[y as usize * self.width..(y as usize + 1) * self.width];
                        let src = &row[i * wo + js.start..i * wo + js.end];
                        if s == 1 {
                            dst[x0..x0 + js.len()].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        } else {
                            for (v, xx) in src.iter().zip((x0..).step_by(s)) {
                                dst[xx] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
