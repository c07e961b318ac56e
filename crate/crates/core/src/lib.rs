//! A desk-scale numerics lab for trainable INT8 attention.
//!
//! The crate pairs a tiled INT8 attention kernel (forward pass with online
//! softmax and per-token P quantization, backward pass that recomputes logits
//! from retained quantized operands) with a full-precision f64 oracle that
//! materializes every intermediate tensor. A pseudo-quantized oracle mode
//! injects quantize-dequantize round trips at chosen MatMul sites so the
//! error contribution of each tensor can be traced, and the `analysis` and
//! `experiments` modules turn those comparisons into reproducible tables.
//!
//! Modules:
//! * [`tensor`] - dense f64 matrices, the seeded RNG, softmax, fp16 rounding.
//! * [`quant`] - the symmetric INT8 quantizer, per-token P quantization, and
//!   integer matmul.
//! * [`attn_ref`] - the naive oracle and the pseudo-quantized tracing mode.
//! * [`attn_tiled`] - the tiled INT8 forward/backward kernel.
//! * [`preprocess`] - K-/Q-smoothing and QK-norm with their exact
//!   compensation identities.
//! * [`analysis`] - cosine/relative-l2/RMS metrics and the dS magnitude
//!   bound check.
//! * [`experiments`] - config handling, the four experiment runners, and
//!   deterministic CSV/JSON output.

pub mod analysis;
pub mod attn_ref;
pub mod attn_tiled;
pub mod error;
pub mod experiments;
pub mod preprocess;
pub mod quant;
pub mod tensor;

pub use analysis::{
    check_ds_bound, compare_traces, cosine_similarity, rel_l2, rms, BoundCheckResult, ErrorEntry,
    ErrorReport,
};
pub use attn_ref::{
    backward_ref, forward_ref, pseudo_quantized_attention, pseudo_quantized_attention_smoothed,
    trace_ref, AttentionInputs, AttentionTrace, ForwardTrace, Precision, PrecisionPolicy,
};
pub use attn_tiled::{sagebwd_backward, sagebwd_forward, ForwardOutput, TilingConfig};
pub use error::{Error, Result};
pub use experiments::ExperimentConfig;
pub use preprocess::{
    dk_with_bias_correction, dq_from_smoothed_k, k_smooth, logits_with_smoothing, q_smooth_blockwise,
    qk_norm, QkNormParams, SmoothingArtifacts,
};
pub use quant::{
    dequantize, dequantize_per_token, quantize_p_per_token, quantize_per_block, quantized_matmul,
    PerTokenQuantizedBlock, QuantOperand, QuantizedBlock,
};
pub use tensor::{gaussian_matrix, round_to_fp16, row_softmax, Matrix, Rng, RNG_ALGORITHM};
