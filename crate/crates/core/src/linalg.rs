//! Dense row-major matrices and the handful of kernels the tape needs.

use serde::{Deserialize, Serialize};

/// A dense row-major `rows × cols` matrix of `f64`.
///
/// Vectors are represented as `1 × n` row matrices.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "DMatrix::from_vec: {rows}x{cols} needs {} entries",
            rows * cols
        );
        DMatrix { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        DMatrix {
            rows: 1,
            cols,
            data,
        }
    }

    pub fn column_vector(data: Vec<f64>) -> Self {
        let rows = data.len();
        DMatrix {
            rows,
            cols: 1,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        DMatrix::from_vec(1, 1, vec![v])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DMatrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies the selected rows into a new matrix, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> DMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DMatrix::from_vec(idx.len(), self.cols, data)
    }

    /// Resizes in place to `rows × cols`, zero-filling. Keeps the allocation.
    pub fn reset(&mut self, rows: usize, cols: usize) {
        self.rows = rows;
        self.cols = cols;
        self.data.clear();
        self.data.resize(rows * cols, 0.0);
    }

    /// Overwrites this matrix with a copy of `other`, reusing the allocation.
    pub fn assign(&mut self, other: &DMatrix) {
        self.rows = other.rows;
        self.cols = other.cols;
        self.data.clear();
        self.data.extend_from_slice(&other.data);
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> DMatrix {
        DMatrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Plain triple-loop product `self · other`.
    pub fn matmul(&self, other: &DMatrix) -> DMatrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = DMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                axpy(self.data[i * self.cols + k], other.row(k), orow);
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Four dot products of `a0..a3` against the same `b`, each summed in the
/// same order as [`dot`] so results are bit-identical to four separate calls.
#[inline]
fn dot4(a: [&[f64]; 4], b: &[f64]) -> [f64; 4] {
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = b.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        let (b0, b1, b2, b3) = (b[i], b[i + 1], b[i + 2], b[i + 3]);
        for (acc, a) in acc.iter_mut().zip(a) {
            acc[0] += a[i] * b0;
            acc[1] += a[i + 1] * b1;
            acc[2] += a[i + 2] * b2;
            acc[3] += a[i + 3] * b3;
        }
    }
    let mut out = [0.0; 4];
    for (k, (acc, a)) in acc.iter().zip(a).enumerate() {
        let mut tail = 0.0;
        for i in 4 * chunks..b.len() {
            tail += a[i] * b[i];
        }
        out[k] = (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
    }
    out
}

/// `out = x Wᵀ + b` with `W` stored row-major as `fan_out × fan_in`.
/// Rows of `x` are processed four at a time so each weight row is loaded once per block.
pub(crate) fn affine_rows(x: &DMatrix, w: &[f64], b: Option<&[f64]>, fan_out: usize, out: &mut DMatrix) {
    let (n, fan_in) = (x.rows(), x.cols());
    debug_assert_eq!(w.len(), fan_in * fan_out);
    out.reset(n, fan_out);
    let full = n / 4 * 4;
    for r in (0..full).step_by(4) {
        let xs = [x.row(r), x.row(r + 1), x.row(r + 2), x.row(r + 3)];
        for o in 0..fan_out {
            let mut acc = dot4(xs, &w[o * fan_in..(o + 1) * fan_in]);
            if let Some(b) = b {
                acc.iter_mut().for_each(|a| *a += b[o]);
            }
            for (k, a) in acc.into_iter().enumerate() {
                out.data[(r + k) * fan_out + o] = a;
            }
        }
    }
    for r in full..n {
        let xr = x.row(r);
        for o in 0..fan_out {
            let mut acc = dot(xr, &w[o * fan_in..(o + 1) * fan_in]);
            if let Some(b) = b {
                acc += b[o];
            }
            out.data[r * fan_out + o] = acc;
        }
    }
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable `log(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs y > 0");
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
