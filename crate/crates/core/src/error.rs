use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the attention lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data length {got} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, got: usize },

    #[error("matrix entry at ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },

    #[error("{what} must be non-negative, got {value}")]
    NegativeParameter { what: &'static str, value: f64 },

    #[error("block size {block} does not divide dimension {len}")]
    NonDivisibleBlock { len: usize, block: usize },

    #[error("per-token quantization: rowmax_s[{row}] = {rowmax_s} exceeds running max m[{row}] = {m}")]
    RunningMaxViolated { row: usize, rowmax_s: f64, m: f64 },

    #[error("per-token operand cannot be transposed (per-token scales are row scales)")]
    PerTokenTranspose,

    #[error("per-token precision is only valid at the pv site (found at {site})")]
    PerTokenOutsidePv { site: &'static str },

    #[error("tiling config blocks ({cfg_q}, {cfg_kv}) disagree with policy blocks ({pol_q}, {pol_kv})")]
    InconsistentBlocks {
        cfg_q: usize,
        cfg_kv: usize,
        pol_q: usize,
        pol_kv: usize,
    },

    #[error("forward output is missing retained quantized operands ({what})")]
    MissingRetainedOperands { what: &'static str },

    #[error("smoothing artifacts missing: {what}")]
    MissingArtifacts { what: &'static str },

    #[error("smoothing artifacts inconsistent: {what}")]
    InconsistentArtifacts { what: &'static str },

    #[error("relative l2 error undefined: reference tensor has zero norm")]
    ZeroReferenceNorm,

    #[error("{what} must not be empty")]
    EmptyInput { what: &'static str },

    #[error("config: unknown key `{key}`")]
    UnknownConfigKey { key: String },

    #[error("config: invalid value `{value}` for `{key}`: {reason}")]
    InvalidConfigValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("{0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),

    #[error("json output: {0}")]
    Json(#[from] serde_json::Error),
}
