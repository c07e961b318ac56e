//! The four experiment runners.
//!
//! Each runner fans out over (sigma, seed) or trial units with rayon and
//! collects in input order, so outputs are independent of the thread count.

use rayon::prelude::*;

use crate::analysis::{check_ds_bound, compare_traces, cosine_similarity, rel_l2, REPORT_TENSORS};
use crate::attn_ref::{
    pseudo_quantized_attention_smoothed, trace_ref, AttentionInputs, AttentionTrace,
    PrecisionPolicy,
};
use crate::attn_tiled::{sagebwd_backward, sagebwd_forward};
use crate::error::{Error, Result};
use crate::preprocess::{k_smooth, q_smooth_blockwise, qk_norm, QkNormParams, SmoothingArtifacts};
use crate::tensor::{gaussian_matrix, Matrix, Rng, RNG_ALGORITHM};

use super::output::{BoundSummaryRow, ResultRow};
use super::ExperimentConfig;

/// Synthetic Gaussian inputs for one run: Q, K, V, dO drawn from independent
/// substreams of `seed` (streams 0..3), with QK-norm applied first when the
/// config asks for it.
pub fn generate_inputs(
    cfg: &ExperimentConfig,
    sigma_q: f64,
    sigma_k: f64,
    seed: u64,
) -> Result<AttentionInputs> {
    let (n, d) = (cfg.seq_len, cfg.head_dim);
    let draw = |stream: u64, sigma: f64| {
        gaussian_matrix(n, d, sigma, &mut Rng::from_seed(Rng::derive_stream(seed, stream)))
    };
    let mut q = draw(0, sigma_q)?;
    let mut k = draw(1, sigma_k)?;
    let v = draw(2, cfg.sigma_v)?;
    let dout = draw(3, cfg.sigma_do)?;
    if cfg.qk_norm {
        let (qn, kn) = qk_norm(&q, &k, &QkNormParams::unit(d))?;
        q = qn;
        k = kn;
    }
    AttentionInputs::new(q, k, v, dout)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn result_row(
    experiment: &str,
    cfg_echo: &str,
    tensor: &str,
    cos: &[f64],
    rel: &[f64],
) -> ResultRow {
    let (cm, cs) = mean_std(cos);
    let (rm, rs) = mean_std(rel);
    ResultRow {
        experiment: experiment.to_string(),
        config: cfg_echo.to_string(),
        tensor: tensor.to_string(),
        cos_sim_mean: cm,
        cos_sim_std: cs,
        rel_l2_mean: rm,
        rel_l2_std: rs,
        seeds: cos.len(),
        rng: RNG_ALGORITHM.to_string(),
    }
}

/// Tensor columns reported by the sweep (the tiled kernel's outputs).
const SWEEP_TENSORS: [&str; 4] = ["Output", "dQ", "dK", "dV"];

/// Sweeps sigma_Q = sigma_K over `sigma_list`, running the tiled kernel
/// against the oracle on fresh inputs per (sigma, seed) and reporting
/// Output/dQ/dK/dV metrics averaged over seeds.
pub fn run_sweep_qkstd(cfg: &ExperimentConfig, sigma_list: &[f64]) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    if sigma_list.is_empty() {
        return Err(Error::EmptyInput { what: "sigma_list" });
    }
    if cfg.q_smooth {
        return Err(Error::Unsupported(
            "the tiled kernel does not carry the Q-smoothing bias branch; \
             use trace-components or ablate-smoothing for Q-smoothing"
                .to_string(),
        ));
    }
    let tasks: Vec<(usize, u64)> = sigma_list
        .iter()
        .enumerate()
        .flat_map(|(si, _)| cfg.seeds.iter().map(move |&s| (si, s)))
        .collect();
    let per_task: Result<Vec<[(f64, f64); 4]>> = tasks
        .par_iter()
        .map(|&(si, seed)| {
            let sigma = sigma_list[si];
            let inputs = generate_inputs(cfg, sigma, sigma, seed)?;
            let oracle = trace_ref(&inputs)?;
            let kernel_inputs = if cfg.k_smooth {
                inputs.with_k(k_smooth(&inputs.k).0)
            } else {
                inputs.clone()
            };
            let tiling = cfg.tiling();
            let fwd = sagebwd_forward(&kernel_inputs, &tiling)?;
            let (dq, dk, dv) = sagebwd_backward(&fwd, &kernel_inputs, &tiling)?;
            let pairs: [(&Matrix, &Matrix); 4] = [
                (&oracle.o, &fwd.o),
                (&oracle.dq, &dq),
                (&oracle.dk, &dk),
                (&oracle.dv, &dv),
            ];
            let mut metrics = [(0.0, 0.0); 4];
            for (slot, (r, t)) in metrics.iter_mut().zip(pairs) {
                *slot = (cosine_similarity(r, t)?, rel_l2(r, t)?);
            }
            Ok(metrics)
        })
        .collect();
    let per_task = per_task?;

    let mut rows = Vec::with_capacity(sigma_list.len() * SWEEP_TENSORS.len());
    for (si, &sigma) in sigma_list.iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.sigma_q = sigma;
        row_cfg.sigma_k = sigma;
        let echo = row_cfg.echo();
        for (ti, tensor) in SWEEP_TENSORS.iter().enumerate() {
            let cos: Vec<f64> = (0..cfg.seeds.len())
                .map(|k| per_task[si * cfg.seeds.len() + k][ti].0)
                .collect();
            let rel: Vec<f64> = (0..cfg.seeds.len())
                .map(|k| per_task[si * cfg.seeds.len() + k][ti].1)
                .collect();
            rows.push(result_row("sweep-qkstd", &echo, tensor, &cos, &rel));
        }
    }
    Ok(rows)
}

/// Smoothing configuration of one ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingSetting {
    None,
    KOnly,
    QAndK,
}

impl SmoothingSetting {
    pub fn label(self) -> &'static str {
        match self {
            SmoothingSetting::None => "none",
            SmoothingSetting::KOnly => "k",
            SmoothingSetting::QAndK => "qk",
        }
    }
}

/// Runs the pseudo-quantized pipeline on `inputs` under one smoothing
/// setting: transforms Q/K, forwards the artifacts so the logit bias and the
/// dK bias branch are applied, and returns the materialized trace.
pub fn smoothing_setting_trace(
    inputs: &AttentionInputs,
    policy: &PrecisionPolicy,
    setting: SmoothingSetting,
) -> Result<AttentionTrace> {
    let mut test_inputs = inputs.clone();
    let mut artifacts = SmoothingArtifacts::none();
    if matches!(setting, SmoothingSetting::KOnly | SmoothingSetting::QAndK) {
        let (k_sm, art_k) = k_smooth(&inputs.k);
        test_inputs.k = k_sm;
        artifacts.mu_k = art_k.mu_k;
        artifacts.enabled_k = true;
    }
    if matches!(setting, SmoothingSetting::QAndK) {
        let (q_sm, art_q) = q_smooth_blockwise(&inputs.q, policy.block_q)?;
        test_inputs.q = q_sm;
        artifacts.mu_q_blocks = art_q.mu_q_blocks;
        artifacts.enabled_q = true;
    }
    pseudo_quantized_attention_smoothed(&test_inputs, policy, &artifacts)
}

fn setting_from_toggles(cfg: &ExperimentConfig) -> SmoothingSetting {
    match (cfg.k_smooth, cfg.q_smooth) {
        (_, true) => SmoothingSetting::QAndK,
        (true, false) => SmoothingSetting::KOnly,
        (false, false) => SmoothingSetting::None,
    }
}

/// Component tracing: pseudo-quantized run vs the oracle on identical
/// synthetic inputs, reporting all eight intermediate tensors.
pub fn run_trace_components(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let setting = setting_from_toggles(cfg);
    let mut resolved = cfg.clone();
    resolved.normalize();
    let policy = resolved.policy.clone();
    let per_seed: Result<Vec<Vec<(f64, f64)>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let inputs = generate_inputs(cfg, cfg.sigma_q, cfg.sigma_k, seed)?;
            let oracle = trace_ref(&inputs)?;
            let test = smoothing_setting_trace(&inputs, &policy, setting)?;
            let report = compare_traces(&oracle, &test)?;
            Ok(report.entries.iter().map(|e| (e.cos_sim, e.rel_l2)).collect())
        })
        .collect();
    let per_seed = per_seed?;

    let echo = cfg.echo();
    let mut rows = Vec::with_capacity(REPORT_TENSORS.len());
    for (ti, tensor) in REPORT_TENSORS.iter().enumerate() {
        let cos: Vec<f64> = per_seed.iter().map(|m| m[ti].0).collect();
        let rel: Vec<f64> = per_seed.iter().map(|m| m[ti].1).collect();
        rows.push(result_row("trace-components", &echo, tensor, &cos, &rel));
    }
    Ok(rows)
}

/// Outcome of the bound-check experiment.
#[derive(Debug, Clone, Copy)]
pub struct BoundSummary {
    pub trials: usize,
    pub violations: usize,
    /// Smallest rhs/lhs ratio observed; infinite if every trial had dS = 0.
    pub min_margin: f64,
}

impl BoundSummary {
    pub fn to_row(&self, cfg: &ExperimentConfig) -> BoundSummaryRow {
        BoundSummaryRow {
            experiment: "bound-check".to_string(),
            config: cfg.echo(),
            trials: self.trials,
            violations: self.violations,
            min_margin: self.min_margin,
            rng: RNG_ALGORITHM.to_string(),
        }
    }
}

/// Checks the dS magnitude bound on `trials` oracle traces with fresh inputs
/// per trial (trial seeds derived from the first config seed).
pub fn run_bound_check(cfg: &ExperimentConfig, trials: usize) -> Result<BoundSummary> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::EmptyInput { what: "trials" });
    }
    let base = cfg.seeds[0];
    let results: Result<Vec<(bool, f64)>> = (0..trials as u64)
        .into_par_iter()
        .map(|trial| {
            let seed = Rng::derive_stream(base, trial);
            let inputs = generate_inputs(cfg, cfg.sigma_q, cfg.sigma_k, seed)?;
            let trace = trace_ref(&inputs)?;
            let res = check_ds_bound(&trace);
            Ok((res.holds, res.margin))
        })
        .collect();
    let results = results?;
    Ok(BoundSummary {
        trials,
        violations: results.iter().filter(|(holds, _)| !holds).count(),
        min_margin: results
            .iter()
            .map(|&(_, m)| m)
            .fold(f64::INFINITY, f64::min),
    })
}

/// Runs the pseudo-quantized pipeline under no smoothing, K-smoothing, and
/// Q+K smoothing on identical inputs and reports per-tensor metrics side by
/// side (24 rows: 3 settings x 8 tensors).
pub fn run_smoothing_ablation(cfg: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let mut resolved = cfg.clone();
    resolved.normalize();
    let policy = resolved.policy.clone();
    const SETTINGS: [SmoothingSetting; 3] = [
        SmoothingSetting::None,
        SmoothingSetting::KOnly,
        SmoothingSetting::QAndK,
    ];
    let per_seed: Result<Vec<Vec<Vec<(f64, f64)>>>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let inputs = generate_inputs(cfg, cfg.sigma_q, cfg.sigma_k, seed)?;
            let oracle = trace_ref(&inputs)?;
            let mut per_setting = Vec::with_capacity(SETTINGS.len());
            for setting in SETTINGS {
                let test = smoothing_setting_trace(&inputs, &policy, setting)?;
                let report = compare_traces(&oracle, &test)?;
                per_setting
                    .push(report.entries.iter().map(|e| (e.cos_sim, e.rel_l2)).collect());
            }
            Ok(per_setting)
        })
        .collect();
    let per_seed = per_seed?;

    let mut rows = Vec::with_capacity(SETTINGS.len() * REPORT_TENSORS.len());
    for (si, setting) in SETTINGS.iter().enumerate() {
        let mut row_cfg = cfg.clone();
        row_cfg.k_smooth = !matches!(setting, SmoothingSetting::None);
        row_cfg.q_smooth = matches!(setting, SmoothingSetting::QAndK);
        let echo = format!("{};smoothing={}", row_cfg.echo(), setting.label());
        for (ti, tensor) in REPORT_TENSORS.iter().enumerate() {
            let cos: Vec<f64> = per_seed.iter().map(|m| m[si][ti].0).collect();
            let rel: Vec<f64> = per_seed.iter().map(|m| m[si][ti].1).collect();
            rows.push(result_row("ablate-smoothing", &echo, tensor, &cos, &rel));
        }
    }
    Ok(rows)
}
