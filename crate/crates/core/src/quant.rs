//! INT8 quantization primitives.
//!
//! The symmetric per-block quantizer maps a tile X to `(scale, X_hat)` with
//! `scale = max(|X|)/127` and `X_hat = round(X/scale)` (ties to even), so the
//! largest-magnitude entry always lands exactly on +-127. The forward P tile
//! additionally uses a per-row ("per-token") scheme whose scales come from the
//! online-softmax running max.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Scale substituted for all-zero tiles so dequantization stays well defined
/// (and still reproduces exact zeros).
pub const EPS_SCALE: f64 = 1e-12;

/// Integer tile plus one scale factor: the result of the per-block quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scale: f64,
}

impl QuantizedBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }
}

/// Integer tile with non-negative entries and one scale per row, used for the
/// forward-pass P tile.
#[derive(Debug, Clone, PartialEq)]
pub struct PerTokenQuantizedBlock {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scales: Vec<f64>,
}

impl PerTokenQuantizedBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn values(&self) -> &[i8] {
        &self.values
    }
}

/// Symmetric per-block INT8 quantization: `scale = max(|X|)/127`,
/// `values = round(X/scale)` with ties to even, clamped to [-127, 127].
pub fn quantize_per_block(x: &Matrix) -> QuantizedBlock {
    quantize_with_scale(x, max_abs_scale(x))
}

/// Per-block quantization with the scale rounded through f32 first. The
/// default keeps scales in f64 to isolate INT8 rounding error; this strict
/// variant measures the extra error of f32 scale storage.
pub fn quantize_per_block_f32_scale(x: &Matrix) -> QuantizedBlock {
    quantize_with_scale(x, max_abs_scale(x) as f32 as f64)
}

fn max_abs_scale(x: &Matrix) -> f64 {
    let max = x.max_abs();
    if max == 0.0 {
        EPS_SCALE
    } else {
        max / 127.0
    }
}

fn quantize_with_scale(x: &Matrix, scale: f64) -> QuantizedBlock {
    let inv = 1.0 / scale;
    let values = x
        .data()
        .iter()
        .map(|&v| (v * inv).round_ties_even().clamp(-127.0, 127.0) as i8)
        .collect();
    QuantizedBlock {
        rows: x.rows(),
        cols: x.cols(),
        values,
        scale,
    }
}

/// Reconstructs the real-valued tile: `values * scale` entrywise.
pub fn dequantize(q: &QuantizedBlock) -> Matrix {
    let data = q.values.iter().map(|&v| v as f64 * q.scale).collect();
    Matrix::from_raw(q.rows, q.cols, data)
}

pub fn dequantize_per_token(q: &PerTokenQuantizedBlock) -> Matrix {
    let mut data = Vec::with_capacity(q.values.len());
    for i in 0..q.rows {
        let s = q.scales[i];
        data.extend(q.values[i * q.cols..(i + 1) * q.cols].iter().map(|&v| v as f64 * s));
    }
    Matrix::from_raw(q.rows, q.cols, data)
}

/// Quantize-dequantize round trip of one tile.
pub fn fake_quantize(x: &Matrix) -> Matrix {
    dequantize(&quantize_per_block(x))
}

/// Quantize-dequantize applied independently to each `block_rows x cols`
/// row band (per-block granularity for N x D operands).
pub fn fake_quantize_rows(x: &Matrix, block_rows: usize) -> Result<Matrix> {
    fake_quantize_grid(x, block_rows, x.cols())
}

/// Quantize-dequantize applied independently to each `block_rows x block_cols`
/// tile (per-block granularity for N x N operands such as P and dS).
pub fn fake_quantize_grid(x: &Matrix, block_rows: usize, block_cols: usize) -> Result<Matrix> {
    if x.rows() % block_rows != 0 {
        return Err(Error::NonDivisibleBlock {
            len: x.rows(),
            block: block_rows,
        });
    }
    if x.cols() % block_cols != 0 {
        return Err(Error::NonDivisibleBlock {
            len: x.cols(),
            block: block_cols,
        });
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for r0 in (0..x.rows()).step_by(block_rows) {
        for c0 in (0..x.cols()).step_by(block_cols) {
            let tile = x.block(r0, block_rows, c0, block_cols);
            out.set_block(r0, c0, &fake_quantize(&tile));
        }
    }
    Ok(out)
}

/// Per-token quantization of the unnormalized softmax tile
/// `P_tilde = exp(S - m)`: row scales `exp(rowmax_s - m)/127`, values rounded
/// into [0, 127]. The row owning the running max quantizes its peak to 127 by
/// construction.
pub fn quantize_p_per_token(
    p_tilde: &Matrix,
    rowmax_s: &[f64],
    m: &[f64],
) -> Result<PerTokenQuantizedBlock> {
    let rows = p_tilde.rows();
    if rowmax_s.len() != rows || m.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "quantize_p_per_token",
            left: (rows, p_tilde.cols()),
            right: (rowmax_s.len(), m.len()),
        });
    }
    let mut scales = Vec::with_capacity(rows);
    for r in 0..rows {
        if rowmax_s[r] > m[r] + 1e-9 {
            return Err(Error::RunningMaxViolated {
                row: r,
                rowmax_s: rowmax_s[r],
                m: m[r],
            });
        }
        let s = (rowmax_s[r] - m[r]).exp() / 127.0;
        // exp underflow means the whole row of P_tilde underflowed too;
        // fall back to the all-zero-tile scale.
        scales.push(if s > 0.0 { s } else { EPS_SCALE });
    }
    let cols = p_tilde.cols();
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let inv = 1.0 / scales[r];
        values.extend(
            p_tilde.row(r)
                .iter()
                .map(|&v| (v * inv).round_ties_even().clamp(0.0, 127.0) as i8),
        );
    }
    Ok(PerTokenQuantizedBlock {
        rows,
        cols,
        values,
        scales,
    })
}

/// Left operand of a quantized matrix multiply.
#[derive(Debug, Clone, Copy)]
pub enum QuantOperand<'a> {
    PerBlock(&'a QuantizedBlock),
    PerToken(&'a PerTokenQuantizedBlock),
}

/// Integer matrix product with i32 accumulation, then scale application:
/// scalar x scalar for per-block x per-block, per-row x scalar when the left
/// operand is per-token. With tile dims <= 128 the accumulator cannot
/// overflow (128 * 127^2 < 2^31); larger inner dims are checked by assertion.
pub fn quantized_matmul(
    a: QuantOperand<'_>,
    b: &QuantizedBlock,
    transpose_a: bool,
    transpose_b: bool,
) -> Result<Matrix> {
    let (a_rows, a_cols, a_vals): (usize, usize, &[i8]) = match a {
        QuantOperand::PerBlock(q) => (q.rows, q.cols, &q.values),
        QuantOperand::PerToken(q) => {
            if transpose_a {
                return Err(Error::PerTokenTranspose);
            }
            (q.rows, q.cols, &q.values)
        }
    };
    let (m, k) = if transpose_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (kb, n) = if transpose_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != kb {
        return Err(Error::ShapeMismatch {
            op: "quantized_matmul",
            left: (m, k),
            right: (kb, n),
        });
    }
    assert!(
        (k as i64) * 127 * 127 <= i32::MAX as i64,
        "inner dimension {k} would overflow i32 accumulation"
    );

    let a_at = |i: usize, j: usize| -> i32 {
        let v = if transpose_a { a_vals[j * a_cols + i] } else { a_vals[i * a_cols + j] };
        v as i32
    };
    let b_at = |i: usize, j: usize| -> i32 {
        let v = if transpose_b { b.values[j * b.cols + i] } else { b.values[i * b.cols + j] };
        v as i32
    };

    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc: i32 = 0;
            for kk in 0..k {
                acc += a_at(i, kk) * b_at(kk, j);
            }
            out.push(acc as f64);
        }
    }
    let mut result = Matrix::from_raw(m, n, out);
    match a {
        QuantOperand::PerBlock(q) => {
            let s = q.scale * b.scale;
            result = result.scale(s);
        }
        QuantOperand::PerToken(q) => {
            for i in 0..m {
                let s = q.scales[i] * b.scale;
                for v in result.row_mut(i) {
                    *v *= s;
                }
            }
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{gaussian_matrix, Rng};
    use approx::assert_relative_eq;

    #[test]
    fn unit_scale_tile() {
        let x = Matrix::from_rows(&[vec![127.0, -127.0], vec![0.0, 63.5]]).unwrap();
        let q = quantize_per_block(&x);
        assert_eq!(q.scale(), 1.0);
        // 63.5 is a tie and rounds to the even neighbor 64.
        assert_eq!(q.values(), &[127, -127, 0, 64]);
    }

    #[test]
    fn all_zero_tile_uses_eps_scale() {
        let q = quantize_per_block(&Matrix::zeros(3, 3));
        assert_eq!(q.scale(), EPS_SCALE);
        assert!(q.values().iter().all(|&v| v == 0));
        assert!(dequantize(&q).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn round_trip_half_step_bound() {
        let mut rng = Rng::from_seed(21);
        let x = gaussian_matrix(64, 64, 1.0, &mut rng).unwrap();
        let q = quantize_per_block(&x);
        let back = dequantize(&q);
        let bound = q.scale() / 2.0 + 1e-12;
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= bound, "|{a} - {b}| > {bound}");
        }
    }

    #[test]
    fn max_magnitude_saturates_grid() {
        for seed in 0..10 {
            let x = gaussian_matrix(16, 16, 2.5, &mut Rng::from_seed(seed)).unwrap();
            let q = quantize_per_block(&x);
            let max = q.values().iter().map(|&v| (v as i32).abs()).max().unwrap();
            assert_eq!(max, 127);
        }
    }

    #[test]
    fn dequantize_single_entry() {
        let q = quantize_with_scale(&Matrix::from_rows(&[vec![1.27]]).unwrap(), 0.01);
        assert_eq!(q.values(), &[127]);
        assert_relative_eq!(dequantize(&q).get(0, 0), 1.27, epsilon = 1e-15);
    }

    #[test]
    fn grid_values_round_trip_exactly() {
        // X already on the grid {-127 s, ..., 127 s}: round trip is the identity.
        let s = 0.037;
        let vals: Vec<f64> = (-127..=127).step_by(2).map(|v| v as f64 * s).collect();
        let n = vals.len();
        let x = Matrix::new(1, n, vals).unwrap();
        let back = dequantize(&quantize_per_block(&x));
        assert_eq!(back, x);
        let again = dequantize(&quantize_per_block(&back));
        assert_eq!(again, back);
    }

    #[test]
    fn f32_scale_mode_changes_scale_only_slightly() {
        let x = gaussian_matrix(32, 32, 1.0, &mut Rng::from_seed(5)).unwrap();
        let q64 = quantize_per_block(&x);
        let q32 = quantize_per_block_f32_scale(&x);
        assert_ne!(q64.scale(), q32.scale());
        assert_relative_eq!(q64.scale(), q32.scale(), max_relative = 1e-6);
    }

    #[test]
    fn per_token_row_owning_max_hits_127() {
        // rowmax_s == m: the tile owns the running max, so scale = 1/127 and
        // the peak entry quantizes to exactly 127.
        let p = Matrix::from_rows(&[vec![1.0, 0.5]]).unwrap();
        let q = quantize_p_per_token(&p, &[0.0], &[0.0]).unwrap();
        assert_relative_eq!(q.scales()[0], 1.0 / 127.0, epsilon = 1e-18);
        assert_eq!(q.values(), &[127, 64]); // 0.5 * 127 = 63.5 ties to 64
    }

    #[test]
    fn per_token_small_tile_does_not_clamp() {
        // rowmax_s = m - ln(127): scales are 1/127^2 and all entries of
        // P_tilde (<= 1/127) stay inside [0, 127] without clamping.
        let ln127 = 127.0f64.ln();
        let rows = 4;
        let cols = 8;
        let mut rng = Rng::from_seed(3);
        let mut data = Vec::new();
        for _ in 0..rows * cols {
            data.push((1.0 / 127.0) * rng.uniform01());
        }
        let p = Matrix::new(rows, cols, data).unwrap();
        let q = quantize_p_per_token(&p, &vec![-ln127; rows], &vec![0.0; rows]).unwrap();
        for s in q.scales() {
            assert_relative_eq!(*s, 1.0 / (127.0 * 127.0), max_relative = 1e-12);
        }
        for (&v, orig) in q.values().iter().zip(p.data()) {
            assert!((0..=127).contains(&(v as i32)));
            let unclamped = (orig / q.scales()[0]).round_ties_even();
            assert_eq!(unclamped as i32, v as i32, "clamping occurred");
        }
    }

    #[test]
    fn per_token_rejects_running_max_violation() {
        let p = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let err = quantize_p_per_token(&p, &[1.0], &[0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn per_token_reconstruction_bound() {
        // Invariant from the type: values[r] * scales[r] reconstructs the row
        // within scales[r]/2 entrywise.
        let s = gaussian_matrix(8, 16, 2.0, &mut Rng::from_seed(9)).unwrap();
        let m = s.row_maxes();
        let mut data = Vec::with_capacity(8 * 16);
        for i in 0..8 {
            data.extend(s.row(i).iter().map(|&v| (v - m[i]).exp()));
        }
        let p_tilde = Matrix::from_raw(8, 16, data);
        let q = quantize_p_per_token(&p_tilde, &m, &m).unwrap();
        let back = dequantize_per_token(&q);
        for i in 0..8 {
            for j in 0..16 {
                assert!((back.get(i, j) - p_tilde.get(i, j)).abs() <= q.scales()[i] / 2.0 + 1e-15);
            }
        }
    }

    #[test]
    fn quantized_matmul_grid_inputs_are_exact() {
        // Inputs already on their grids incur no rounding, so the quantized
        // product equals the exact product.
        let s = 0.125;
        let a = Matrix::from_rows(&[vec![127.0 * s, 0.0], vec![0.0, 127.0 * s]]).unwrap();
        let vals = vec![vec![3.0 * s, -5.0 * s], vec![64.0 * s, 127.0 * s]];
        let b = Matrix::from_rows(&vals).unwrap();
        let qa = quantize_per_block(&a);
        let qb = quantize_per_block(&b);
        let got = quantized_matmul(QuantOperand::PerBlock(&qa), &qb, false, false).unwrap();
        let want = a.matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn quantized_matmul_error_within_budget() {
        let mut worst = 0.0f64;
        for seed in 0..20 {
            let a = gaussian_matrix(64, 64, 1.0, &mut Rng::from_seed(100 + seed)).unwrap();
            let b = gaussian_matrix(64, 64, 1.0, &mut Rng::from_seed(200 + seed)).unwrap();
            let exact = a.matmul(&b).unwrap();
            let qa = quantize_per_block(&a);
            let qb = quantize_per_block(&b);
            let got = quantized_matmul(QuantOperand::PerBlock(&qa), &qb, false, false).unwrap();
            let rel = got.sub(&exact).unwrap().frob_norm() / exact.frob_norm();
            worst = worst.max(rel);
        }
        assert!(worst <= 0.03, "worst relative l2 {worst}");
    }

    #[test]
    fn per_token_matmul_matches_dequantize_composition() {
        let mut rng = Rng::from_seed(31);
        let s = gaussian_matrix(16, 32, 1.0, &mut rng).unwrap();
        let m = s.row_maxes();
        let p_tilde = Matrix::from_raw(
            16,
            32,
            (0..16)
                .flat_map(|i| {
                    let mi = m[i];
                    s.row(i).iter().map(move |&v| (v - mi).exp()).collect::<Vec<_>>()
                })
                .collect(),
        );
        let qp = quantize_p_per_token(&p_tilde, &m, &m).unwrap();
        let v = gaussian_matrix(32, 8, 1.0, &mut rng).unwrap();
        let qv = quantize_per_block(&v);
        let got = quantized_matmul(QuantOperand::PerToken(&qp), &qv, false, false).unwrap();
        let want = dequantize_per_token(&qp).matmul(&dequantize(&qv)).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-15);
        }
    }

    #[test]
    fn error_growth_with_sigma() {
        // Quantization noise scales with the step size, so for a fixed seed
        // the absolute product error grows with sigma. The relative error of
        // a bare GEMM is scale-invariant for Gaussian inputs (they form a
        // scale family); the relative degradation the sweep experiment
        // measures enters through the softmax path and is asserted on the
        // attention pipeline in the acceptance suite.
        let sigmas = [1.0, 3.0, 5.0, 8.0, 10.0];
        for seed in 0..20u64 {
            let mut abs = Vec::new();
            let mut rel = Vec::new();
            for &sigma in &sigmas {
                let a = gaussian_matrix(64, 64, sigma, &mut Rng::from_seed(500 + seed)).unwrap();
                let b = gaussian_matrix(64, 64, sigma, &mut Rng::from_seed(900 + seed)).unwrap();
                let exact = a.matmul(&b).unwrap();
                let got = quantized_matmul(
                    QuantOperand::PerBlock(&quantize_per_block(&a)),
                    &quantize_per_block(&b),
                    false,
                    false,
                )
                .unwrap();
                let err = got.sub(&exact).unwrap().frob_norm();
                abs.push(err);
                rel.push(err / exact.frob_norm());
            }
            for w in 0..sigmas.len() - 1 {
                assert!(abs[w + 1] > abs[w], "absolute error must grow with sigma");
                let ratio = rel[w + 1] / rel[w];
                assert!(
                    (0.5..2.0).contains(&ratio),
                    "relative error should stay flat, got ratio {ratio}"
                );
            }
        }
    }

    #[test]
    fn quantized_matmul_rejects_mismatch() {
        let a = quantize_per_block(&Matrix::zeros(2, 3));
        let b = quantize_per_block(&Matrix::zeros(2, 3));
        assert!(quantized_matmul(QuantOperand::PerBlock(&a), &b, false, false).is_err());
    }
}
