//! Property tests for the algebraic invariants of the kernels.

use proptest::prelude::*;

use sagebwd::quant::{dequantize, quantize_per_block, EPS_SCALE};
use sagebwd::tensor::f16_round;
use sagebwd::{cosine_similarity, rel_l2, round_to_fp16, row_softmax, Matrix};

fn matrix_strategy(max_dim: usize, max_abs: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(move |(r, c)| {
        proptest::collection::vec(-max_abs..max_abs, r * c)
            .prop_map(move |data| Matrix::new(r, c, data).unwrap())
    })
}

proptest! {
    #[test]
    fn matmul_is_homogeneous(
        a in matrix_strategy(6, 50.0),
        b_data in proptest::collection::vec(-50.0f64..50.0, 36),
        alpha in -10.0f64..10.0,
    ) {
        let b = Matrix::new(a.cols(), 6, b_data[..a.cols() * 6].to_vec()).unwrap();
        let scaled_first = a.scale(alpha).matmul(&b).unwrap();
        let scaled_after = a.matmul(&b).unwrap().scale(alpha);
        for (x, y) in scaled_first.data().iter().zip(scaled_after.data()) {
            let tol = 1e-12 * x.abs().max(y.abs()).max(1e-6);
            prop_assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_is_additive(
        a in matrix_strategy(5, 20.0),
        b_data in proptest::collection::vec(-20.0f64..20.0, 25),
        c_data in proptest::collection::vec(-20.0f64..20.0, 25),
    ) {
        let b = Matrix::new(a.cols(), 5, b_data[..a.cols() * 5].to_vec()).unwrap();
        let c = Matrix::new(a.cols(), 5, c_data[..a.cols() * 5].to_vec()).unwrap();
        let lhs = a.matmul(&b.add(&c).unwrap()).unwrap();
        let rhs = a.matmul(&b).unwrap().add(&a.matmul(&c).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            let tol = 1e-11 * x.abs().max(y.abs()).max(1.0);
            prop_assert!((x - y).abs() <= tol);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(s in matrix_strategy(8, 500.0)) {
        let p = row_softmax(&s);
        for i in 0..p.rows() {
            let sum: f64 = p.row(i).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            prop_assert!(p.row(i).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(
        s in matrix_strategy(8, 100.0),
        shift in -200.0f64..200.0,
    ) {
        let shifted = s.map(|v| v + shift);
        let p0 = row_softmax(&s);
        let p1 = row_softmax(&shifted);
        for (x, y) in p0.data().iter().zip(p1.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn fp16_rounding_is_idempotent(x in -1e7f64..1e7) {
        let once = f16_round(x);
        prop_assert_eq!(f16_round(once), once);
        prop_assert!(once.abs() <= 65504.0);
    }

    #[test]
    fn fp16_matrix_idempotent(m in matrix_strategy(6, 1e5)) {
        let once = round_to_fp16(&m);
        let twice = round_to_fp16(&once);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn quantizer_round_trip_bound(m in matrix_strategy(8, 1e3)) {
        let q = quantize_per_block(&m);
        let back = dequantize(&q);
        for (a, b) in m.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= q.scale() / 2.0 + 1e-12);
        }
        if m.max_abs() > 0.0 {
            let peak = q.values().iter().map(|&v| (v as i32).abs()).max().unwrap();
            prop_assert_eq!(peak, 127);
        } else {
            prop_assert_eq!(q.scale(), EPS_SCALE);
        }
    }

    #[test]
    fn cosine_is_scale_invariant(
        m in matrix_strategy(6, 10.0),
        c in 1e-3f64..1e3,
    ) {
        let noisy = m.map(|v| v + 0.1 * v.sin() + 0.01);
        let base = cosine_similarity(&m, &noisy).unwrap();
        let scaled = cosine_similarity(&m, &noisy.scale(c)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12);
    }

    #[test]
    fn rel_l2_triangle_consistency(
        a in matrix_strategy(5, 10.0),
        b_data in proptest::collection::vec(-10.0f64..10.0, 25),
        c_data in proptest::collection::vec(-10.0f64..10.0, 25),
    ) {
        prop_assume!(a.frob_norm() > 1e-6);
        let b = Matrix::new(a.rows(), a.cols(), b_data[..a.rows() * a.cols()].to_vec()).unwrap();
        let c = Matrix::new(a.rows(), a.cols(), c_data[..a.rows() * a.cols()].to_vec()).unwrap();
        let direct = rel_l2(&a, &c).unwrap();
        let via_b = (a.sub(&b).unwrap().frob_norm() + b.sub(&c).unwrap().frob_norm())
            / a.frob_norm();
        prop_assert!(direct <= via_b + 1e-12);
    }
}
