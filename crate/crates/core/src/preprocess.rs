//! Input transforms applied ahead of quantization: K-smoothing (global key
//! mean subtraction), block-wise Q-smoothing, and per-token RMS normalization
//! of Q and K.
//!
//! K-smoothing needs no compensation anywhere: row softmax is shift invariant
//! and every row of dS sums to zero, so `dS K_sm == dS K`. Q-smoothing drops
//! row-varying logit terms and therefore needs the `mu_Q K_smᵀ` bias added
//! back to the logits, and the gradient for K needs the extra bias branch
//! `dK_bias = (dSᵀ 1) mu_Qᵀ`.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Means captured by the smoothing transforms, needed to rebuild exact logits
/// and gradients.
#[derive(Debug, Clone, Default)]
pub struct SmoothingArtifacts {
    /// Global per-channel key mean (length D). Empty unless `enabled_k`.
    pub mu_k: Vec<f64>,
    /// Per-channel query mean of each Q row block (each length D). Empty
    /// unless `enabled_q`.
    pub mu_q_blocks: Vec<Vec<f64>>,
    pub enabled_q: bool,
    pub enabled_k: bool,
}

impl SmoothingArtifacts {
    pub fn none() -> Self {
        Self::default()
    }

    /// Combines K-side and Q-side artifacts produced by separate transforms.
    pub fn merge(k_side: SmoothingArtifacts, q_side: SmoothingArtifacts) -> SmoothingArtifacts {
        SmoothingArtifacts {
            mu_k: k_side.mu_k,
            mu_q_blocks: q_side.mu_q_blocks,
            enabled_q: q_side.enabled_q,
            enabled_k: k_side.enabled_k,
        }
    }

    /// Number of rows per Q block implied by the artifacts, given N.
    fn q_block_rows(&self, n: usize) -> Result<usize> {
        if self.mu_q_blocks.is_empty() || n % self.mu_q_blocks.len() != 0 {
            return Err(Error::InconsistentArtifacts {
                what: "mu_q_blocks does not tile the query rows",
            });
        }
        Ok(n / self.mu_q_blocks.len())
    }
}

/// Subtracts the global per-channel mean from K. Column means of the result
/// are exactly zero up to f64 rounding.
pub fn k_smooth(k: &Matrix) -> (Matrix, SmoothingArtifacts) {
    let mu = k.col_means();
    let mut sm = k.clone();
    for i in 0..sm.rows() {
        for (v, m) in sm.row_mut(i).iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    (
        sm,
        SmoothingArtifacts {
            mu_k: mu,
            mu_q_blocks: Vec::new(),
            enabled_q: false,
            enabled_k: true,
        },
    )
}

/// Subtracts the per-channel mean of each `block_q`-row block of Q.
pub fn q_smooth_blockwise(q: &Matrix, block_q: usize) -> Result<(Matrix, SmoothingArtifacts)> {
    if block_q == 0 || q.rows() % block_q != 0 {
        return Err(Error::NonDivisibleBlock {
            len: q.rows(),
            block: block_q,
        });
    }
    let mut sm = q.clone();
    let mut mu_blocks = Vec::with_capacity(q.rows() / block_q);
    for r0 in (0..q.rows()).step_by(block_q) {
        let mu = q.row_block(r0, block_q).col_means();
        for i in r0..r0 + block_q {
            for (v, m) in sm.row_mut(i).iter_mut().zip(&mu) {
                *v -= m;
            }
        }
        mu_blocks.push(mu);
    }
    Ok((
        sm,
        SmoothingArtifacts {
            mu_k: Vec::new(),
            mu_q_blocks: mu_blocks,
            enabled_q: true,
            enabled_k: false,
        },
    ))
}

/// Row-varying bias dropped from the smoothed logits: for each Q block i the
/// rank-one term `1 (mu_Q_i K_smᵀ)`. Returns an N x N matrix (zero when
/// Q-smoothing is disabled). `k_sm` must be the same key matrix the smoothed
/// product uses.
pub fn smoothing_logit_bias(
    artifacts: &SmoothingArtifacts,
    n_rows: usize,
    k_sm: &Matrix,
) -> Result<Matrix> {
    let mut bias = Matrix::zeros(n_rows, k_sm.rows());
    if !artifacts.enabled_q {
        return Ok(bias);
    }
    let block = artifacts.q_block_rows(n_rows)?;
    for (bi, mu) in artifacts.mu_q_blocks.iter().enumerate() {
        if mu.len() != k_sm.cols() {
            return Err(Error::InconsistentArtifacts {
                what: "mu_Q length does not match head dim",
            });
        }
        let mu_m = Matrix::from_raw(1, mu.len(), mu.clone());
        let row = mu_m.matmul_nt(k_sm)?; // 1 x N_k
        for i in bi * block..(bi + 1) * block {
            bias.row_mut(i).copy_from_slice(row.row(0));
        }
    }
    Ok(bias)
}

/// Logits of the smoothed decomposition that reproduce the original row
/// softmax: `(Q_sm K_smᵀ + bias) * head_dim_scale`, where the bias is the
/// `mu_Q K_smᵀ` term (absent for K-smoothing only). Row-constant terms are
/// dropped.
pub fn logits_with_smoothing(
    q_sm: &Matrix,
    k_sm: &Matrix,
    artifacts: &SmoothingArtifacts,
    head_dim_scale: f64,
) -> Result<Matrix> {
    let s = q_sm.matmul_nt(k_sm)?;
    let bias = smoothing_logit_bias(artifacts, q_sm.rows(), k_sm)?;
    Ok(s.add(&bias)?.scale(head_dim_scale))
}

/// dQ computed against the smoothed keys: `dS K_sm * head_dim_scale`. Equal
/// to `dS K * head_dim_scale` whenever the rows of dS sum to zero (exact for
/// oracle traces).
pub fn dq_from_smoothed_k(ds: &Matrix, k_sm: &Matrix, head_dim_scale: f64) -> Result<Matrix> {
    Ok(ds.matmul(k_sm)?.scale(head_dim_scale))
}

/// dK assembled from the centered branch plus the Q-smoothing bias branch:
/// `dSᵀ Q_sm * scale + (dSᵀ 1) mu_Qᵀ * scale` per block. Equals
/// `dSᵀ Q * scale` exactly.
pub fn dk_with_bias_correction(
    ds: &Matrix,
    q_sm: &Matrix,
    artifacts: &SmoothingArtifacts,
    head_dim_scale: f64,
) -> Result<Matrix> {
    if !artifacts.enabled_q {
        return Err(Error::MissingArtifacts {
            what: "Q-smoothing block means",
        });
    }
    let center = ds.matmul_tn(q_sm)?;
    let bias = dk_bias(ds, artifacts)?;
    Ok(center.add(&bias)?.scale(head_dim_scale))
}

/// The Q-smoothing gradient bias branch alone (unscaled):
/// `sum_i (dS_iᵀ 1) mu_Q_iᵀ` over Q row blocks.
pub fn dk_bias(ds: &Matrix, artifacts: &SmoothingArtifacts) -> Result<Matrix> {
    let d = artifacts
        .mu_q_blocks
        .first()
        .map(Vec::len)
        .ok_or(Error::MissingArtifacts {
            what: "Q-smoothing block means",
        })?;
    let block = artifacts.q_block_rows(ds.rows())?;
    let mut bias = Matrix::zeros(ds.cols(), d);
    for (bi, mu) in artifacts.mu_q_blocks.iter().enumerate() {
        // Column sums of this row block of dS: (dS_i)ᵀ 1.
        let mut colsum = vec![0.0; ds.cols()];
        for i in bi * block..(bi + 1) * block {
            for (c, &v) in colsum.iter_mut().zip(ds.row(i)) {
                *c += v;
            }
        }
        for (j, &cs) in colsum.iter().enumerate() {
            for (jj, &m) in mu.iter().enumerate() {
                let cur = bias.get(j, jj);
                bias.set(j, jj, cur + cs * m);
            }
        }
    }
    Ok(bias)
}

/// RMS normalization parameters for Q and K rows.
#[derive(Debug, Clone)]
pub struct QkNormParams {
    pub gamma_q: Vec<f64>,
    pub gamma_k: Vec<f64>,
    pub eps: f64,
}

impl QkNormParams {
    /// All-ones gamma, eps 1e-6.
    pub fn unit(head_dim: usize) -> Self {
        Self {
            gamma_q: vec![1.0; head_dim],
            gamma_k: vec![1.0; head_dim],
            eps: 1e-6,
        }
    }
}

/// Per-token RMS normalization `x -> x / sqrt(mean(x^2) + eps) * gamma` of
/// each row of Q and K.
pub fn qk_norm(q: &Matrix, k: &Matrix, params: &QkNormParams) -> Result<(Matrix, Matrix)> {
    if params.eps <= 0.0 {
        return Err(Error::NegativeParameter {
            what: "qk-norm eps",
            value: params.eps,
        });
    }
    Ok((
        rms_norm_rows(q, &params.gamma_q, params.eps)?,
        rms_norm_rows(k, &params.gamma_k, params.eps)?,
    ))
}

fn rms_norm_rows(x: &Matrix, gamma: &[f64], eps: f64) -> Result<Matrix> {
    if gamma.len() != x.cols() {
        return Err(Error::ShapeMismatch {
            op: "rms_norm",
            left: x.shape(),
            right: (1, gamma.len()),
        });
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let mean_sq = row.iter().map(|&v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (mean_sq + eps).sqrt();
        for (v, &g) in row.iter_mut().zip(gamma) {
            *v *= inv * g;
        }
    }
    Ok(out)
}
