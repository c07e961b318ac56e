//! Tiled INT8 attention: forward pass with online softmax and per-token P
//! quantization, and the matching backward pass that recomputes the logits
//! from the retained quantized operands.
//!
//! The dataflow follows the FlashAttention tiling: Q is split into `block_q`
//! row blocks, K and V into `block_kv` row blocks. Each MatMul site runs at
//! the precision its policy tag requests, so the all-exact policy reproduces
//! the naive oracle up to f64 summation order.
//!
//! Two printed-pseudocode fixups are deliberate: the online-softmax
//! denominator recurrence multiplies the previous `l` by the rescale factor
//! (`l = e^(m_prev - m) * l_prev + rowsum(P~)`), and the running max starts at
//! the most negative finite f64 rather than zero so all-negative logit tiles
//! are handled.
//!
//! Row tiles of the forward pass are independent and run in parallel;
//! backward column tiles run in parallel and dQ contributions are reduced in
//! fixed tile order, so results are bit-stable across thread counts.

use rayon::prelude::*;

use crate::attn_ref::{AttentionInputs, Precision, PrecisionPolicy};
use crate::error::{Error, Result};
use crate::quant::{
    quantize_p_per_token, quantize_per_block, quantized_matmul, QuantOperand, QuantizedBlock,
};
use crate::tensor::{round_to_fp16, Matrix};

/// Tile sizes plus the per-site precision policy.
#[derive(Debug, Clone)]
pub struct TilingConfig {
    pub block_q: usize,
    pub block_kv: usize,
    pub policy: PrecisionPolicy,
}

impl TilingConfig {
    /// Builds a config, aligning the policy's block fields with the tiling.
    pub fn new(block_q: usize, block_kv: usize, policy: PrecisionPolicy) -> Self {
        Self {
            block_q,
            block_kv,
            policy: policy.with_blocks(block_q, block_kv),
        }
    }

    fn validate(&self, seq_len: usize) -> Result<()> {
        self.policy.validate()?;
        if self.policy.block_q != self.block_q || self.policy.block_kv != self.block_kv {
            return Err(Error::InconsistentBlocks {
                cfg_q: self.block_q,
                cfg_kv: self.block_kv,
                pol_q: self.policy.block_q,
                pol_kv: self.policy.block_kv,
            });
        }
        // Ragged tails are rejected rather than padded: padding would change
        // the quantization scales of the tail tiles.
        for block in [self.block_q, self.block_kv] {
            if block == 0 || seq_len % block != 0 {
                return Err(Error::NonDivisibleBlock {
                    len: seq_len,
                    block,
                });
            }
        }
        Ok(())
    }
}

/// Forward result: output, logsumexp, and the per-block quantized operands
/// retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub o: Matrix,
    pub lse: Vec<f64>,
    pub q_blocks: Vec<QuantizedBlock>,
    pub k_blocks: Vec<QuantizedBlock>,
    pub v_blocks: Vec<QuantizedBlock>,
}

fn row_blocks(m: &Matrix, block: usize) -> Vec<Matrix> {
    (0..m.rows() / block)
        .map(|i| m.row_block(i * block, block))
        .collect()
}

/// The qk site: one logits tile, already scaled by 1/sqrt(D).
fn logits_tile(
    policy: &PrecisionPolicy,
    q_exact: &Matrix,
    k_exact: &Matrix,
    q_hat: &QuantizedBlock,
    k_hat: &QuantizedBlock,
    head_dim_scale: f64,
) -> Result<Matrix> {
    let raw = match policy.qk {
        Precision::Exact => q_exact.matmul_nt(k_exact)?,
        Precision::Int8PerBlock => {
            quantized_matmul(QuantOperand::PerBlock(q_hat), k_hat, false, true)?
        }
        Precision::Fp16Emulated => round_to_fp16(&q_exact.matmul_nt(k_exact)?),
        Precision::Int8PerToken => return Err(Error::PerTokenOutsidePv { site: "qk" }),
    };
    Ok(raw.scale(head_dim_scale))
}

/// Tiled forward pass: per-block quantization of Q, K, V at entry, online
/// softmax over K/V tiles with per-token quantization of the P~ tile, final
/// rescale by the accumulated denominator.
pub fn sagebwd_forward(inputs: &AttentionInputs, cfg: &TilingConfig) -> Result<ForwardOutput> {
    let n = inputs.seq_len();
    let d = inputs.head_dim();
    cfg.validate(n)?;
    let (bq, bkv) = (cfg.block_q, cfg.block_kv);
    let t_m = n / bq;

    let q_exact = row_blocks(&inputs.q, bq);
    let k_exact = row_blocks(&inputs.k, bkv);
    let v_exact = row_blocks(&inputs.v, bkv);
    let q_blocks: Vec<_> = q_exact.iter().map(quantize_per_block).collect();
    let k_blocks: Vec<_> = k_exact.iter().map(quantize_per_block).collect();
    let v_blocks: Vec<_> = v_exact.iter().map(quantize_per_block).collect();

    let per_row: Result<Vec<(Matrix, Vec<f64>)>> = (0..t_m)
        .into_par_iter()
        .map(|i| {
            let mut o_acc = Matrix::zeros(bq, d);
            let mut l = vec![0.0; bq];
            let mut m = vec![f64::MIN; bq];
            for j in 0..k_blocks.len() {
                let s_ij = logits_tile(
                    &cfg.policy,
                    &q_exact[i],
                    &k_exact[j],
                    &q_blocks[i],
                    &k_blocks[j],
                    inputs.head_dim_scale,
                )?;
                let rowmax = s_ij.row_maxes();
                let m_new: Vec<f64> =
                    m.iter().zip(&rowmax).map(|(&a, &b)| a.max(b)).collect();
                let mut p_tilde = s_ij.clone();
                for r in 0..bq {
                    let mr = m_new[r];
                    for v in p_tilde.row_mut(r) {
                        *v = (*v - mr).exp();
                    }
                }
                let rescale: Vec<f64> = m
                    .iter()
                    .zip(&m_new)
                    .map(|(&prev, &new)| (prev - new).exp())
                    .collect();
                for (r, lr) in l.iter_mut().enumerate() {
                    let rowsum: f64 = p_tilde.row(r).iter().sum();
                    *lr = rescale[r] * *lr + rowsum;
                }
                let contrib = match cfg.policy.pv {
                    Precision::Exact => p_tilde.matmul(&v_exact[j])?,
                    Precision::Int8PerToken => {
                        let p_hat = quantize_p_per_token(&p_tilde, &rowmax, &m_new)?;
                        quantized_matmul(QuantOperand::PerToken(&p_hat), &v_blocks[j], false, false)?
                    }
                    Precision::Int8PerBlock => {
                        let p_hat = quantize_per_block(&p_tilde);
                        quantized_matmul(QuantOperand::PerBlock(&p_hat), &v_blocks[j], false, false)?
                    }
                    Precision::Fp16Emulated => round_to_fp16(&p_tilde.matmul(&v_exact[j])?),
                };
                for r in 0..bq {
                    let sc = rescale[r];
                    for (o, &c) in o_acc.row_mut(r).iter_mut().zip(contrib.row(r)) {
                        *o = *o * sc + c;
                    }
                }
                m = m_new;
            }
            let mut lse = Vec::with_capacity(bq);
            for r in 0..bq {
                let inv = 1.0 / l[r];
                for o in o_acc.row_mut(r) {
                    *o *= inv;
                }
                lse.push(m[r] + l[r].ln());
            }
            Ok((o_acc, lse))
        })
        .collect();

    let mut o = Matrix::zeros(n, d);
    let mut lse = Vec::with_capacity(n);
    for (i, (block, block_lse)) in per_row?.into_iter().enumerate() {
        o.set_block(i * bq, 0, &block);
        lse.extend(block_lse);
    }
    Ok(ForwardOutput {
        o,
        lse,
        q_blocks,
        k_blocks,
        v_blocks,
    })
}

/// Tiled backward pass. Logits are recomputed from the retained quantized
/// Q/K blocks so forward and backward see identical quantized scores; dP is
/// kept in (emulated) fp16 under the default policy while the other sites
/// quantize per block.
pub fn sagebwd_backward(
    fwd: &ForwardOutput,
    inputs: &AttentionInputs,
    cfg: &TilingConfig,
) -> Result<(Matrix, Matrix, Matrix)> {
    let n = inputs.seq_len();
    let d = inputs.head_dim();
    cfg.validate(n)?;
    let (bq, bkv) = (cfg.block_q, cfg.block_kv);
    let (t_m, t_n) = (n / bq, n / bkv);
    if fwd.q_blocks.len() != t_m || fwd.k_blocks.len() != t_n || fwd.v_blocks.len() != t_n {
        return Err(Error::MissingRetainedOperands {
            what: "quantized Q/K/V block count does not match the tiling",
        });
    }
    if fwd.o.shape() != (n, d) || fwd.lse.len() != n {
        return Err(Error::MissingRetainedOperands {
            what: "forward output shape does not match the inputs",
        });
    }

    let q_exact = row_blocks(&inputs.q, bq);
    let k_exact = row_blocks(&inputs.k, bkv);
    let v_exact = row_blocks(&inputs.v, bkv);
    let dout_blocks = row_blocks(&inputs.dout, bq);
    let delta: Vec<f64> = (0..n)
        .map(|i| {
            inputs
                .dout
                .row(i)
                .iter()
                .zip(fwd.o.row(i))
                .map(|(&a, &b)| a * b)
                .sum()
        })
        .collect();
    let scale = inputs.head_dim_scale;

    // Per column tile: (dv_j, dk_j, dq contributions over all row tiles).
    let per_col: Result<Vec<(Matrix, Matrix, Matrix)>> = (0..t_n)
        .into_par_iter()
        .map(|j| {
            let mut dv_j = Matrix::zeros(bkv, d);
            let mut dk_j = Matrix::zeros(bkv, d);
            let mut dq_part = Matrix::zeros(n, d);
            for i in 0..t_m {
                let s_ij = logits_tile(
                    &cfg.policy,
                    &q_exact[i],
                    &k_exact[j],
                    &fwd.q_blocks[i],
                    &fwd.k_blocks[j],
                    scale,
                )?;
                let mut p_ij = s_ij;
                for r in 0..bq {
                    let l = fwd.lse[i * bq + r];
                    for v in p_ij.row_mut(r) {
                        *v = (*v - l).exp();
                    }
                }

                let dv_contrib = match cfg.policy.dv {
                    Precision::Exact => p_ij.matmul_tn(&dout_blocks[i])?,
                    Precision::Int8PerBlock => {
                        let p_hat = quantize_per_block(&p_ij);
                        let dout_hat = quantize_per_block(&dout_blocks[i]);
                        quantized_matmul(QuantOperand::PerBlock(&p_hat), &dout_hat, true, false)?
                    }
                    Precision::Fp16Emulated => round_to_fp16(&p_ij.matmul_tn(&dout_blocks[i])?),
                    Precision::Int8PerToken => {
                        return Err(Error::PerTokenOutsidePv { site: "dv" })
                    }
                };
                dv_j.add_block(0, 0, &dv_contrib);

                let dp_ij = match cfg.policy.dp {
                    Precision::Exact => dout_blocks[i].matmul_nt(&v_exact[j])?,
                    Precision::Fp16Emulated => {
                        round_to_fp16(&dout_blocks[i].matmul_nt(&v_exact[j])?)
                    }
                    Precision::Int8PerBlock => {
                        let dout_hat = quantize_per_block(&dout_blocks[i]);
                        quantized_matmul(
                            QuantOperand::PerBlock(&dout_hat),
                            &fwd.v_blocks[j],
                            false,
                            true,
                        )?
                    }
                    Precision::Int8PerToken => {
                        return Err(Error::PerTokenOutsidePv { site: "dp" })
                    }
                };

                let mut ds_ij = p_ij;
                for r in 0..bq {
                    let dr = delta[i * bq + r];
                    for (v, &dp) in ds_ij.row_mut(r).iter_mut().zip(dp_ij.row(r)) {
                        *v *= dp - dr;
                    }
                }

                let needs_ds_hat = cfg.policy.dq == Precision::Int8PerBlock
                    || cfg.policy.dk == Precision::Int8PerBlock;
                let ds_hat = needs_ds_hat.then(|| quantize_per_block(&ds_ij));

                let dq_contrib = match cfg.policy.dq {
                    Precision::Exact => ds_ij.matmul(&k_exact[j])?,
                    Precision::Int8PerBlock => quantized_matmul(
                        QuantOperand::PerBlock(ds_hat.as_ref().unwrap()),
                        &fwd.k_blocks[j],
                        false,
                        false,
                    )?,
                    Precision::Fp16Emulated => round_to_fp16(&ds_ij.matmul(&k_exact[j])?),
                    Precision::Int8PerToken => {
                        return Err(Error::PerTokenOutsidePv { site: "dq" })
                    }
                };
                dq_part.add_block(i * bq, 0, &dq_contrib.scale(scale));

                let dk_contrib = match cfg.policy.dk {
                    Precision::Exact => ds_ij.matmul_tn(&q_exact[i])?,
                    Precision::Int8PerBlock => quantized_matmul(
                        QuantOperand::PerBlock(ds_hat.as_ref().unwrap()),
                        &fwd.q_blocks[i],
                        true,
                        false,
                    )?,
                    Precision::Fp16Emulated => round_to_fp16(&ds_ij.matmul_tn(&q_exact[i])?),
                    Precision::Int8PerToken => {
                        return Err(Error::PerTokenOutsidePv { site: "dk" })
                    }
                };
                dk_j.add_block(0, 0, &dk_contrib.scale(scale));
            }
            Ok((dv_j, dk_j, dq_part))
        })
        .collect();

    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    // Fixed ascending-j reduction keeps f64 sums identical for any thread count.
    for (j, (dv_j, dk_j, dq_part)) in per_col?.into_iter().enumerate() {
        dv.set_block(j * bkv, 0, &dv_j);
        dk.set_block(j * bkv, 0, &dk_j);
        dq.add_block(0, 0, &dq_part);
    }
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attn_ref::{backward_ref, forward_ref, AttentionInputs};
    use crate::tensor::{gaussian_matrix, logsumexp_rows, Matrix, Rng};

    fn random_inputs(n: usize, d: usize, sigma: f64, seed: u64) -> AttentionInputs {
        let q = gaussian_matrix(n, d, sigma, &mut Rng::from_seed(Rng::derive_stream(seed, 0))).unwrap();
        let k = gaussian_matrix(n, d, sigma, &mut Rng::from_seed(Rng::derive_stream(seed, 1))).unwrap();
        let v = gaussian_matrix(n, d, 1.0, &mut Rng::from_seed(Rng::derive_stream(seed, 2))).unwrap();
        let dout =
            gaussian_matrix(n, d, 1.0, &mut Rng::from_seed(Rng::derive_stream(seed, 3))).unwrap();
        AttentionInputs::new(q, k, v, dout).unwrap()
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frob_norm() / a.frob_norm().max(1e-300)
    }

    fn exact_cfg(bq: usize, bkv: usize) -> TilingConfig {
        TilingConfig::new(bq, bkv, PrecisionPolicy::all_exact(bq, bkv))
    }

    fn default_cfg(bq: usize, bkv: usize) -> TilingConfig {
        TilingConfig::new(bq, bkv, PrecisionPolicy::sagebwd_default(bq, bkv))
    }

    #[test]
    fn exact_policy_forward_matches_oracle() {
        let inputs = random_inputs(64, 16, 1.0, 7);
        let fwd = sagebwd_forward(&inputs, &exact_cfg(16, 16)).unwrap();
        let oracle = forward_ref(&inputs).unwrap();
        assert!(rel(&oracle.o, &fwd.o) < 1e-10);
        for (a, b) in fwd.lse.iter().zip(&oracle.lse) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn exact_policy_backward_matches_oracle() {
        let inputs = random_inputs(64, 16, 1.0, 8);
        let cfg = exact_cfg(16, 32);
        let fwd = sagebwd_forward(&inputs, &cfg).unwrap();
        let (dq, dk, dv) = sagebwd_backward(&fwd, &inputs, &cfg).unwrap();
        let oracle = backward_ref(&inputs, &forward_ref(&inputs).unwrap()).unwrap();
        assert!(rel(&oracle.dq, &dq) < 1e-9);
        assert!(rel(&oracle.dk, &dk) < 1e-9);
        assert!(rel(&oracle.dv, &dv) < 1e-9);
    }

    #[test]
    fn single_tile_degenerates_to_direct_logsumexp() {
        let inputs = random_inputs(32, 8, 1.0, 9);
        let fwd = sagebwd_forward(&inputs, &exact_cfg(32, 32)).unwrap();
        let s = inputs
            .q
            .matmul_nt(&inputs.k)
            .unwrap()
            .scale(inputs.head_dim_scale);
        let want = logsumexp_rows(&s);
        for (a, b) in fwd.lse.iter().zip(&want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn lse_matches_oracle_under_quantization_of_own_logits() {
        // The tiled lse is the logsumexp of the *quantized* logits; under the
        // exact policy it must match the oracle closely even with many tiles
        // of all-negative logits.
        let mut inputs = random_inputs(64, 8, 1.0, 10);
        inputs.q = inputs.q.map(|v| v - 20.0); // strongly negative logits
        let fwd = sagebwd_forward(&inputs, &exact_cfg(8, 8)).unwrap();
        let oracle = forward_ref(&inputs).unwrap();
        for (a, b) in fwd.lse.iter().zip(&oracle.lse) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn block_size_independence_under_exact_policy() {
        let inputs = random_inputs(64, 16, 2.0, 11);
        let base = sagebwd_forward(&inputs, &exact_cfg(64, 64)).unwrap();
        let base_grads = sagebwd_backward(&base, &inputs, &exact_cfg(64, 64)).unwrap();
        for (bq, bkv) in [(16, 16), (16, 64), (32, 16), (64, 32)] {
            let cfg = exact_cfg(bq, bkv);
            let fwd = sagebwd_forward(&inputs, &cfg).unwrap();
            assert!(rel(&base.o, &fwd.o) < 1e-9, "O at ({bq},{bkv})");
            let (dq, dk, dv) = sagebwd_backward(&fwd, &inputs, &cfg).unwrap();
            assert!(rel(&base_grads.0, &dq) < 1e-9);
            assert!(rel(&base_grads.1, &dk) < 1e-9);
            assert!(rel(&base_grads.2, &dv) < 1e-9);
        }
    }

    #[test]
    fn zero_dout_zeroes_gradients_under_default_policy() {
        let mut inputs = random_inputs(32, 8, 1.0, 12);
        inputs.dout = Matrix::zeros(32, 8);
        let cfg = default_cfg(8, 8);
        let fwd = sagebwd_forward(&inputs, &cfg).unwrap();
        let (dq, dk, dv) = sagebwd_backward(&fwd, &inputs, &cfg).unwrap();
        for m in [&dq, &dk, &dv] {
            assert!(m.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn default_policy_output_accuracy_small() {
        let inputs = random_inputs(128, 32, 1.0, 13);
        let cfg = default_cfg(32, 32);
        let fwd = sagebwd_forward(&inputs, &cfg).unwrap();
        let oracle = forward_ref(&inputs).unwrap();
        let r = rel(&oracle.o, &fwd.o);
        assert!(r < 0.05, "rel {r}");
    }

    #[test]
    fn ragged_tiles_are_rejected() {
        let inputs = random_inputs(48, 8, 1.0, 14);
        assert!(sagebwd_forward(&inputs, &exact_cfg(32, 16)).is_err());
    }

    #[test]
    fn inconsistent_policy_blocks_are_rejected() {
        let inputs = random_inputs(32, 8, 1.0, 15);
        let cfg = TilingConfig {
            block_q: 16,
            block_kv: 16,
            policy: PrecisionPolicy::all_exact(8, 8),
        };
        assert!(sagebwd_forward(&inputs, &cfg).is_err());
    }

    #[test]
    fn backward_rejects_mismatched_forward_output() {
        let inputs = random_inputs(32, 8, 1.0, 16);
        let cfg = exact_cfg(16, 16);
        let mut fwd = sagebwd_forward(&inputs, &cfg).unwrap();
        fwd.k_blocks.pop();
        assert!(sagebwd_backward(&fwd, &inputs, &cfg).is_err());
    }

    #[test]
    fn results_are_identical_across_thread_counts() {
        let inputs = random_inputs(64, 16, 3.0, 17);
        let cfg = default_cfg(16, 16);
        let run = || {
            let fwd = sagebwd_forward(&inputs, &cfg).unwrap();
            let grads = sagebwd_backward(&fwd, &inputs, &cfg).unwrap();
            (fwd.o, fwd.lse, grads)
        };
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(run);
        let b = pool4.install(run);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2 .0, b.2 .0);
        assert_eq!(a.2 .1, b.2 .1);
        assert_eq!(a.2 .2, b.2 .2);
    }
}
