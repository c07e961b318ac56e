//! Dense row-major f64 matrices, the seeded random generator, and the few
//! scalar kernels (softmax, logsumexp, binary16 rounding) everything else is
//! built from.
//!
//! All reference arithmetic accumulates in f64 so that emulated low-precision
//! paths are always strictly noisier than the oracle.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng as _, SeedableRng};

use crate::error::{Error, Result};

/// Dense 2-D array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, validating length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::DataLength {
                rows,
                cols,
                got: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: idx / cols,
                col: idx % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix. Panics on zero dimensions (programmer error).
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be >= 1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DataLength {
                    rows: r,
                    cols: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| v * alpha)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Entrywise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, &v| acc.max(v.abs()))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|&v| v * v).sum::<f64>().sqrt()
    }

    /// Copy of rows [start, start + count).
    pub fn row_block(&self, start: usize, count: usize) -> Matrix {
        assert!(start + count <= self.rows);
        let data = self.data[start * self.cols..(start + count) * self.cols].to_vec();
        Matrix::from_raw(count, self.cols, data)
    }

    /// Copy of the sub-block at (r0, c0) with the given extent.
    pub fn block(&self, r0: usize, nrows: usize, c0: usize, ncols: usize) -> Matrix {
        assert!(r0 + nrows <= self.rows && c0 + ncols <= self.cols);
        let mut data = Vec::with_capacity(nrows * ncols);
        for i in r0..r0 + nrows {
            data.extend_from_slice(&self.data[i * self.cols + c0..i * self.cols + c0 + ncols]);
        }
        Matrix::from_raw(nrows, ncols, data)
    }

    /// Writes `block` into this matrix at (r0, c0).
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            self.data[dst..dst + block.cols].copy_from_slice(block.row(i));
        }
    }

    /// Adds `block` into this matrix at (r0, c0).
    pub fn add_block(&mut self, r0: usize, c0: usize, block: &Matrix) {
        assert!(r0 + block.rows <= self.rows && c0 + block.cols <= self.cols);
        for i in 0..block.rows {
            let dst = (r0 + i) * self.cols + c0;
            for j in 0..block.cols {
                self.data[dst + j] += block.data[i * block.cols + j];
            }
        }
    }

    /// Per-column means (a length-`cols` vector).
    pub fn col_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (m, &v) in means.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        let inv = 1.0 / self.rows as f64;
        means.iter_mut().for_each(|m| *m *= inv);
        means
    }

    pub fn row_maxes(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v)))
            .collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    /// C = A B with f64 accumulation.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let (m, n) = (self.rows, b.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &b.data[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aik * bv;
                }
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }

    /// C = A Bᵀ (rows of both operands are contiguous dot products).
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let (m, n) = (self.rows, b.rows);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = self.row(i);
            let orow = &mut out[i * n..(i + 1) * n];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = b.row(j);
                let mut acc = 0.0;
                for (&av, &bv) in arow.iter().zip(brow) {
                    acc += av * bv;
                }
                *o = acc;
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }

    /// C = Aᵀ B via rank-1 accumulation over shared rows.
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul_tn",
                left: self.shape(),
                right: b.shape(),
            });
        }
        let (m, n) = (self.cols, b.cols);
        let mut out = vec![0.0; m * n];
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = b.row(r);
            for (i, &av) in arow.iter().enumerate() {
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }
}

/// Row softmax with per-row max subtraction.
pub fn row_softmax(s: &Matrix) -> Matrix {
    softmax_with_lse(s).0
}

/// Row softmax plus the per-row logsumexp `L[i] = max_i + ln(sum exp(s - max))`.
pub fn softmax_with_lse(s: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = s.clone();
    let mut lse = Vec::with_capacity(s.rows());
    for i in 0..s.rows() {
        let row = out.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
        lse.push(max + sum.ln());
    }
    (out, lse)
}

/// Per-row logsumexp of a matrix.
pub fn logsumexp_rows(s: &Matrix) -> Vec<f64> {
    softmax_with_lse(s).1
}

/// Largest finite binary16 magnitude.
pub const FP16_MAX: f64 = 65504.0;

const FP16_MIN_NORMAL: f64 = 6.103515625e-5; // 2^-14
const FP16_SUBNORMAL_QUANTUM: f64 = 5.960464477539063e-8; // 2^-24
// Values at or above this round to binary16 infinity under RNE; the lab
// saturates them to FP16_MAX instead.
const FP16_OVERFLOW: f64 = 65520.0;

/// Rounds a finite f64 to the nearest IEEE binary16 value (ties to even),
/// widened back to f64. Magnitudes that would overflow saturate to +-65504;
/// subnormals are preserved.
pub fn f16_round(x: f64) -> f64 {
    debug_assert!(x.is_finite());
    if x == 0.0 {
        return x;
    }
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let mag = x.abs();
    if mag >= FP16_OVERFLOW {
        return sign * FP16_MAX;
    }
    if mag < FP16_MIN_NORMAL {
        // Subnormal grid: fixed quantum 2^-24. All intermediates are exact.
        return sign * (mag / FP16_SUBNORMAL_QUANTUM).round_ties_even() * FP16_SUBNORMAL_QUANTUM;
    }
    // Normal grid: 11-bit significand, step 2^(e-10) for exponent e.
    let e = ((mag.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    let step = f64::powi(2.0, e - 10);
    sign * (mag / step).round_ties_even() * step
}

/// Entrywise binary16 quantization of a matrix (see [`f16_round`]).
pub fn round_to_fp16(x: &Matrix) -> Matrix {
    x.map(f16_round)
}

/// Deterministic random generator: ChaCha8 keystream, 53-bit uniforms,
/// Marsaglia polar method for normals.
///
/// The sample stream is fully specified by the algorithm below and a 64-bit
/// seed, so experiment outputs are reproducible byte-for-byte:
///
/// * base stream: `ChaCha8Rng::seed_from_u64(seed)` 64-bit outputs,
/// * uniform in [0, 1): `(u64 >> 11) * 2^-53`,
/// * standard normal: Marsaglia polar on uniforms mapped to (-1, 1), the
///   second variate of each accepted pair is cached and returned next.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

/// Name recorded in experiment metadata for reproducibility.
pub const RNG_ALGORITHM: &str = "chacha8/marsaglia-polar";

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    /// SplitMix64-style counter mixing: derives the seed for substream
    /// `stream` of a base seed. Used to give each generated tensor (and each
    /// trial of multi-instance experiments) an independent stream.
    pub fn derive_stream(seed: u64, stream: u64) -> u64 {
        let mut z = seed
            .wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal variate (mean 0, variance 1).
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform01() - 1.0;
            let v = 2.0 * self.uniform01() - 1.0;
            let s = u * u + v * v;
            if s >= 1.0 || s == 0.0 {
                continue;
            }
            let f = (-2.0 * s.ln() / s).sqrt();
            self.spare_normal = Some(v * f);
            return u * f;
        }
    }
}

/// Matrix with i.i.d. Normal(0, sigma^2) entries, filled row-major from `rng`.
pub fn gaussian_matrix(rows: usize, cols: usize, sigma: f64, rng: &mut Rng) -> Result<Matrix> {
    if sigma < 0.0 {
        return Err(Error::NegativeParameter {
            what: "sigma",
            value: sigma,
        });
    }
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyInput { what: "matrix shape" });
    }
    let data = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
    Ok(Matrix::from_raw(rows, cols, data))
}
