//! Error metrics (cosine similarity, relative l2, RMS), the dS magnitude
//! bound checker, and per-tensor comparison reports between a quantized run
//! and the oracle.
//!
//! Tensors are flattened for all metrics; the delta vector is treated as a
//! 1 x N matrix.

use crate::attn_ref::AttentionTrace;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Cosine similarity of the flattened tensors. Two zero tensors are
/// identical and return 1; exactly one zero tensor returns 0.
pub fn cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let na = a.frob_norm();
    let nb = b.frob_norm();
    if na == 0.0 && nb == 0.0 {
        return Ok(1.0);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Relative l2 (Frobenius) error `|ref - test| / |ref|`. A zero reference is
/// an error so degenerate baselines cannot pass silently.
pub fn rel_l2(reference: &Matrix, test: &Matrix) -> Result<f64> {
    if reference.shape() != test.shape() {
        return Err(Error::ShapeMismatch {
            op: "rel_l2",
            left: reference.shape(),
            right: test.shape(),
        });
    }
    let norm = reference.frob_norm();
    if norm == 0.0 {
        return Err(Error::ZeroReferenceNorm);
    }
    Ok(reference.sub(test)?.frob_norm() / norm)
}

/// Root mean square of all entries.
pub fn rms(x: &Matrix) -> f64 {
    let n = x.data().len() as f64;
    (x.data().iter().map(|&v| v * v).sum::<f64>() / n).sqrt()
}

/// Result of checking `RMS(dS) <= (1/sqrt(N)) max_i |dP_i - delta_i 1|_inf`.
#[derive(Debug, Clone, Copy)]
pub struct BoundCheckResult {
    /// RMS(dS).
    pub lhs: f64,
    /// (1/sqrt(N)) max_i max_j |dP[i][j] - delta[i]|.
    pub rhs: f64,
    pub holds: bool,
    /// rhs / lhs; infinite when lhs is zero.
    pub margin: f64,
}

/// Evaluates the dS magnitude bound on a materialized trace.
pub fn check_ds_bound(trace: &AttentionTrace) -> BoundCheckResult {
    let n = trace.dp.rows() as f64;
    let lhs = rms(&trace.ds);
    let mut max_dev = 0.0f64;
    for i in 0..trace.dp.rows() {
        let d = trace.delta[i];
        for &v in trace.dp.row(i) {
            max_dev = max_dev.max((v - d).abs());
        }
    }
    let rhs = max_dev / n.sqrt();
    BoundCheckResult {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-15,
        margin: if lhs == 0.0 { f64::INFINITY } else { rhs / lhs },
    }
}

/// Tensor names in report order (the component-tracing column layout).
pub const REPORT_TENSORS: [&str; 8] = ["delta", "P", "dP", "dS", "O", "dQ", "dK", "dV"];

/// Per-tensor comparison of one quantized run against the oracle.
#[derive(Debug, Clone)]
pub struct ErrorEntry {
    pub tensor: &'static str,
    pub cos_sim: f64,
    pub rel_l2: f64,
    pub rms_ref: f64,
    pub rms_test: f64,
}

/// Comparison report covering delta, P, dP, dS, O, dQ, dK, dV in that order.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub entries: Vec<ErrorEntry>,
}

impl ErrorReport {
    pub fn get(&self, tensor: &str) -> Option<&ErrorEntry> {
        self.entries.iter().find(|e| e.tensor == tensor)
    }
}

fn delta_matrix(delta: &[f64]) -> Matrix {
    Matrix::from_raw(1, delta.len(), delta.to_vec())
}

/// Compares two traces produced from identical inputs tensor by tensor.
pub fn compare_traces(reference: &AttentionTrace, test: &AttentionTrace) -> Result<ErrorReport> {
    let ref_delta = delta_matrix(&reference.delta);
    let test_delta = delta_matrix(&test.delta);
    let pairs: [(&'static str, &Matrix, &Matrix); 8] = [
        ("delta", &ref_delta, &test_delta),
        ("P", &reference.p, &test.p),
        ("dP", &reference.dp, &test.dp),
        ("dS", &reference.ds, &test.ds),
        ("O", &reference.o, &test.o),
        ("dQ", &reference.dq, &test.dq),
        ("dK", &reference.dk, &test.dk),
        ("dV", &reference.dv, &test.dv),
    ];
    let mut entries = Vec::with_capacity(pairs.len());
    for (tensor, r, t) in pairs {
        entries.push(ErrorEntry {
            tensor,
            cos_sim: cosine_similarity(r, t)?,
            rel_l2: rel_l2(r, t)?,
            rms_ref: rms(r),
            rms_test: rms(t),
        });
    }
    Ok(ErrorReport { entries })
}
