//! Full-precision attention oracle that materializes every intermediate, plus
//! a pseudo-quantized mode that injects quantize-dequantize round trips in
//! front of selected matrix multiplications so each tensor's quantization
//! error can be traced against the oracle.
//!
//! All arithmetic is f64; "INT8" sites fake-quantize their operands per tile
//! and then multiply exactly, "fp16" sites round the product through binary16.
//! The upstream gradient dO is treated as error-free: it is only quantized as
//! a local operand of the dV (and optionally dP) product, never rewritten.

use crate::error::{Error, Result};
use crate::preprocess::{dk_bias, smoothing_logit_bias, SmoothingArtifacts};
use crate::quant::{
    dequantize_per_token, fake_quantize_grid, fake_quantize_rows, quantize_p_per_token,
};
use crate::tensor::{round_to_fp16, softmax_with_lse, Matrix};

/// One attention head's inputs: Q, K, V and the upstream output gradient dO,
/// all N x D.
#[derive(Debug, Clone)]
pub struct AttentionInputs {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub dout: Matrix,
    /// Logit scaling 1/sqrt(D).
    pub head_dim_scale: f64,
}

impl AttentionInputs {
    pub fn new(q: Matrix, k: Matrix, v: Matrix, dout: Matrix) -> Result<Self> {
        for (other, name) in [(&k, "k"), (&v, "v"), (&dout, "dout")] {
            if other.shape() != q.shape() {
                let _ = name;
                return Err(Error::ShapeMismatch {
                    op: "attention inputs",
                    left: q.shape(),
                    right: other.shape(),
                });
            }
        }
        let head_dim_scale = 1.0 / (q.cols() as f64).sqrt();
        Ok(Self {
            q,
            k,
            v,
            dout,
            head_dim_scale,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.q.cols()
    }

    /// Same inputs with the key matrix replaced (used by smoothing wrappers).
    pub fn with_k(&self, k: Matrix) -> Self {
        Self {
            k,
            ..self.clone()
        }
    }

    /// Same inputs with the query matrix replaced.
    pub fn with_q(&self, q: Matrix) -> Self {
        Self {
            q,
            ..self.clone()
        }
    }
}

/// Forward-pass intermediates.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Scaled logits Q Kᵀ / sqrt(D), N x N.
    pub s: Matrix,
    /// Row softmax of s.
    pub p: Matrix,
    /// Attention output P V, N x D.
    pub o: Matrix,
    /// Per-row logsumexp of s.
    pub lse: Vec<f64>,
}

/// All materialized intermediates of one forward + backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub s: Matrix,
    pub p: Matrix,
    pub o: Matrix,
    pub lse: Vec<f64>,
    /// Softmax correction rowsum(dO . O), length N.
    pub delta: Vec<f64>,
    pub dp: Matrix,
    pub ds: Matrix,
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

/// Precision of one MatMul site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    #[serde(rename = "exact")]
    Exact,
    #[serde(rename = "int8-per-block")]
    Int8PerBlock,
    #[serde(rename = "int8-per-token")]
    Int8PerToken,
    #[serde(rename = "fp16-emulated")]
    Fp16Emulated,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Exact => "exact",
            Precision::Int8PerBlock => "int8-per-block",
            Precision::Int8PerToken => "int8-per-token",
            Precision::Fp16Emulated => "fp16-emulated",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "exact" => Some(Precision::Exact),
            "int8-per-block" => Some(Precision::Int8PerBlock),
            "int8-per-token" => Some(Precision::Int8PerToken),
            "fp16-emulated" => Some(Precision::Fp16Emulated),
            _ => None,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-site precision assignment for the seven-tensor attention dataflow,
/// plus the tile sizes used for per-block granularity.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PrecisionPolicy {
    pub qk: Precision,
    pub pv: Precision,
    pub dv: Precision,
    pub dp: Precision,
    pub dq: Precision,
    pub dk: Precision,
    pub block_q: usize,
    pub block_kv: usize,
}

impl PrecisionPolicy {
    /// Every site exact: the quantized pipeline degenerates to the oracle.
    pub fn all_exact(block_q: usize, block_kv: usize) -> Self {
        Self {
            qk: Precision::Exact,
            pv: Precision::Exact,
            dv: Precision::Exact,
            dp: Precision::Exact,
            dq: Precision::Exact,
            dk: Precision::Exact,
            block_q,
            block_kv,
        }
    }

    /// The shipping configuration: INT8 everywhere except dP, which stays in
    /// emulated fp16; the forward P V product uses per-token scales.
    pub fn sagebwd_default(block_q: usize, block_kv: usize) -> Self {
        Self {
            qk: Precision::Int8PerBlock,
            pv: Precision::Int8PerToken,
            dv: Precision::Int8PerBlock,
            dp: Precision::Fp16Emulated,
            dq: Precision::Int8PerBlock,
            dk: Precision::Int8PerBlock,
            block_q,
            block_kv,
        }
    }

    pub fn with_blocks(mut self, block_q: usize, block_kv: usize) -> Self {
        self.block_q = block_q;
        self.block_kv = block_kv;
        self
    }

    /// Site tags in dataflow order, for display.
    pub fn sites(&self) -> [(&'static str, Precision); 6] {
        [
            ("qk", self.qk),
            ("pv", self.pv),
            ("dv", self.dv),
            ("dp", self.dp),
            ("dq", self.dq),
            ("dk", self.dk),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_q == 0 || self.block_kv == 0 {
            return Err(Error::EmptyInput { what: "policy blocks" });
        }
        for (site, tag) in self.sites() {
            if tag == Precision::Int8PerToken && site != "pv" {
                return Err(Error::PerTokenOutsidePv { site });
            }
        }
        Ok(())
    }
}

/// Exact forward pass: S = Q Kᵀ / sqrt(D), P = softmax(S), O = P V, plus the
/// per-row logsumexp retained for the backward pass.
pub fn forward_ref(inputs: &AttentionInputs) -> Result<ForwardTrace> {
    let s = inputs.q.matmul_nt(&inputs.k)?.scale(inputs.head_dim_scale);
    let (p, lse) = softmax_with_lse(&s);
    let o = p.matmul(&inputs.v)?;
    Ok(ForwardTrace { s, p, o, lse })
}

fn delta_of(dout: &Matrix, o: &Matrix) -> Vec<f64> {
    (0..dout.rows())
        .map(|i| dout.row(i).iter().zip(o.row(i)).map(|(&a, &b)| a * b).sum())
        .collect()
}

fn ds_of(p: &Matrix, dp: &Matrix, delta: &[f64]) -> Matrix {
    let mut ds = p.clone();
    for i in 0..ds.rows() {
        let d = delta[i];
        for (v, &dpv) in ds.row_mut(i).iter_mut().zip(dp.row(i)) {
            *v *= dpv - d;
        }
    }
    ds
}

/// Exact backward pass completing a forward trace:
/// delta = rowsum(dO . O), dP = dO Vᵀ, dS = P . (dP - delta 1ᵀ),
/// dQ = dS K / sqrt(D), dK = dSᵀ Q / sqrt(D), dV = Pᵀ dO.
pub fn backward_ref(inputs: &AttentionInputs, fwd: &ForwardTrace) -> Result<AttentionTrace> {
    let delta = delta_of(&inputs.dout, &fwd.o);
    let dp = inputs.dout.matmul_nt(&inputs.v)?;
    let ds = ds_of(&fwd.p, &dp, &delta);
    let dq = ds.matmul(&inputs.k)?.scale(inputs.head_dim_scale);
    let dk = ds.matmul_tn(&inputs.q)?.scale(inputs.head_dim_scale);
    let dv = fwd.p.matmul_tn(&inputs.dout)?;
    Ok(AttentionTrace {
        s: fwd.s.clone(),
        p: fwd.p.clone(),
        o: fwd.o.clone(),
        lse: fwd.lse.clone(),
        delta,
        dp,
        ds,
        dq,
        dk,
        dv,
    })
}

/// Convenience: exact forward + backward.
pub fn trace_ref(inputs: &AttentionInputs) -> Result<AttentionTrace> {
    let fwd = forward_ref(inputs)?;
    backward_ref(inputs, &fwd)
}

/// Same dataflow as the oracle, but each MatMul site runs at the precision
/// its policy tag requests. P is recomputed from the quantized logits path so
/// it carries upstream error, exactly like the fused kernel would see it.
pub fn pseudo_quantized_attention(
    inputs: &AttentionInputs,
    policy: &PrecisionPolicy,
) -> Result<AttentionTrace> {
    pseudo_quantized_attention_smoothed(inputs, policy, &SmoothingArtifacts::none())
}

/// Pseudo-quantized attention over smoothed inputs. `inputs` must already
/// hold the smoothed Q/K; `artifacts` supply the means so the dropped logits
/// bias is added back (Q-smoothing) and dK gains its bias branch. With empty
/// artifacts this is `pseudo_quantized_attention`; with an all-exact policy
/// and empty artifacts it reproduces the oracle bit for bit.
pub fn pseudo_quantized_attention_smoothed(
    inputs: &AttentionInputs,
    policy: &PrecisionPolicy,
    artifacts: &SmoothingArtifacts,
) -> Result<AttentionTrace> {
    policy.validate()?;
    let (bq, bkv) = (policy.block_q, policy.block_kv);
    let scale = inputs.head_dim_scale;

    // qk site.
    let mut s_raw = match policy.qk {
        Precision::Exact => inputs.q.matmul_nt(&inputs.k)?,
        Precision::Int8PerBlock => {
            let qf = fake_quantize_rows(&inputs.q, bq)?;
            let kf = fake_quantize_rows(&inputs.k, bkv)?;
            qf.matmul_nt(&kf)?
        }
        Precision::Fp16Emulated => round_to_fp16(&inputs.q.matmul_nt(&inputs.k)?),
        Precision::Int8PerToken => return Err(Error::PerTokenOutsidePv { site: "qk" }),
    };
    if artifacts.enabled_q {
        // Low-rank bias added back in full precision.
        s_raw = s_raw.add(&smoothing_logit_bias(artifacts, inputs.seq_len(), &inputs.k)?)?;
    }
    let s = s_raw.scale(scale);
    let (p, lse) = softmax_with_lse(&s);

    // pv site.
    let o = match policy.pv {
        Precision::Exact => p.matmul(&inputs.v)?,
        Precision::Int8PerBlock => {
            let pf = fake_quantize_grid(&p, bq, bkv)?;
            let vf = fake_quantize_rows(&inputs.v, bkv)?;
            pf.matmul(&vf)?
        }
        Precision::Int8PerToken => {
            let rowmax_s = s.row_maxes();
            let qp = quantize_p_per_token(&p, &rowmax_s, &lse)?;
            let pf = dequantize_per_token(&qp);
            let vf = fake_quantize_rows(&inputs.v, bkv)?;
            pf.matmul(&vf)?
        }
        Precision::Fp16Emulated => round_to_fp16(&p.matmul(&inputs.v)?),
    };

    let delta = delta_of(&inputs.dout, &o);

    // dp site (dO is error-free upstream; it is only an operand here).
    let dp = match policy.dp {
        Precision::Exact => inputs.dout.matmul_nt(&inputs.v)?,
        Precision::Int8PerBlock => {
            let doutf = fake_quantize_rows(&inputs.dout, bq)?;
            let vf = fake_quantize_rows(&inputs.v, bkv)?;
            doutf.matmul_nt(&vf)?
        }
        Precision::Fp16Emulated => round_to_fp16(&inputs.dout.matmul_nt(&inputs.v)?),
        Precision::Int8PerToken => return Err(Error::PerTokenOutsidePv { site: "dp" }),
    };

    let ds = ds_of(&p, &dp, &delta);

    // Shared fake-quantized dS for the dq/dk sites.
    let mut ds_fake: Option<Matrix> = None;
    let mut ds_quantized = |ds: &Matrix| -> Result<Matrix> {
        if ds_fake.is_none() {
            ds_fake = Some(fake_quantize_grid(ds, bq, bkv)?);
        }
        Ok(ds_fake.clone().unwrap())
    };

    // dq site.
    let dq_raw = match policy.dq {
        Precision::Exact => ds.matmul(&inputs.k)?,
        Precision::Int8PerBlock => {
            let dsf = ds_quantized(&ds)?;
            let kf = fake_quantize_rows(&inputs.k, bkv)?;
            dsf.matmul(&kf)?
        }
        Precision::Fp16Emulated => round_to_fp16(&ds.matmul(&inputs.k)?),
        Precision::Int8PerToken => return Err(Error::PerTokenOutsidePv { site: "dq" }),
    };
    let dq = dq_raw.scale(scale);

    // dk site (centered branch; Q-smoothing adds the exact bias branch).
    let mut dk_raw = match policy.dk {
        Precision::Exact => ds.matmul_tn(&inputs.q)?,
        Precision::Int8PerBlock => {
            let dsf = ds_quantized(&ds)?;
            let qf = fake_quantize_rows(&inputs.q, bq)?;
            dsf.matmul_tn(&qf)?
        }
        Precision::Fp16Emulated => round_to_fp16(&ds.matmul_tn(&inputs.q)?),
        Precision::Int8PerToken => return Err(Error::PerTokenOutsidePv { site: "dk" }),
    };
    if artifacts.enabled_q {
        dk_raw = dk_raw.add(&dk_bias(&ds, artifacts)?)?;
    }
    let dk = dk_raw.scale(scale);

    // dv site (quantizes both P and dO per block).
    let dv = match policy.dv {
        Precision::Exact => p.matmul_tn(&inputs.dout)?,
        Precision::Int8PerBlock => {
            let pf = fake_quantize_grid(&p, bq, bkv)?;
            let doutf = fake_quantize_rows(&inputs.dout, bq)?;
            pf.matmul_tn(&doutf)?
        }
        Precision::Fp16Emulated => round_to_fp16(&p.matmul_tn(&inputs.dout)?),
        Precision::Int8PerToken => return Err(Error::PerTokenOutsidePv { site: "dv" }),
    };

    Ok(AttentionTrace {
        s,
        p,
        o,
        lse,
        delta,
        dp,
        ds,
        dq,
        dk,
        dv,
    })
}
