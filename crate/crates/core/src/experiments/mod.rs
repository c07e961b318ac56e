//! Reproducible experiment drivers: configuration, the four experiment
//! runners, and deterministic CSV/JSON rendering.
//!
//! Every run is a pure function of its config. Seeds and trial indices map to
//! independent generator streams by counter mixing, work is parallelized over
//! (sigma, seed) units, and results are reduced in declaration order, so
//! reruns produce byte-identical artifacts for any thread count.

mod output;
mod run;

pub use output::{
    format_sig, render_bound_summary, render_rows, round_sig, BoundSummaryRow, OutputFormat,
    ResultRow,
};
pub use run::{
    generate_inputs, run_bound_check, run_smoothing_ablation, run_sweep_qkstd,
    run_trace_components, smoothing_setting_trace, BoundSummary, SmoothingSetting,
};

use serde::Serialize;

use crate::attn_ref::{Precision, PrecisionPolicy};
use crate::attn_tiled::TilingConfig;
use crate::error::{Error, Result};
use crate::tensor::RNG_ALGORITHM;

/// Crate version stamped into experiment metadata.
pub const LAB_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fully resolved experiment configuration.
///
/// `block_q`/`block_kv` are the single source of truth for tile sizes; the
/// policy's block fields are kept in sync by [`ExperimentConfig::normalize`].
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub seq_len: usize,
    pub head_dim: usize,
    pub block_q: usize,
    pub block_kv: usize,
    pub sigma_q: f64,
    pub sigma_k: f64,
    pub sigma_v: f64,
    pub sigma_do: f64,
    pub seeds: Vec<u64>,
    pub qk_norm: bool,
    pub k_smooth: bool,
    pub q_smooth: bool,
    pub policy: PrecisionPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seq_len: 1024,
            head_dim: 64,
            block_q: 64,
            block_kv: 64,
            sigma_q: 1.0,
            sigma_k: 1.0,
            sigma_v: 1.0,
            sigma_do: 1.0,
            seeds: (1..=20).collect(),
            qk_norm: false,
            k_smooth: true,
            q_smooth: false,
            policy: PrecisionPolicy::sagebwd_default(64, 64),
        }
    }
}

impl ExperimentConfig {
    /// Loads a flat `key = value` config file on top of the defaults.
    /// Unknown keys are errors. `#` starts a comment line.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfigValue {
                    key: line.to_string(),
                    value: String::new(),
                    reason: "expected `key = value`".to_string(),
                });
            };
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.normalize();
        Ok(cfg)
    }

    /// Applies one `key = value` assignment (config-file syntax).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: &str| Error::InvalidConfigValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "seq_len" => self.seq_len = value.parse().map_err(|_| bad("not a count"))?,
            "head_dim" => self.head_dim = value.parse().map_err(|_| bad("not a count"))?,
            "block_q" => self.block_q = value.parse().map_err(|_| bad("not a count"))?,
            "block_kv" => self.block_kv = value.parse().map_err(|_| bad("not a count"))?,
            "sigma_q" => self.sigma_q = parse_sigma(value).ok_or_else(|| bad("not a sigma"))?,
            "sigma_k" => self.sigma_k = parse_sigma(value).ok_or_else(|| bad("not a sigma"))?,
            "sigma_v" => self.sigma_v = parse_sigma(value).ok_or_else(|| bad("not a sigma"))?,
            "sigma_do" => self.sigma_do = parse_sigma(value).ok_or_else(|| bad("not a sigma"))?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| s.trim().parse::<u64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| bad("expected comma-separated u64 seeds"))?;
                if self.seeds.is_empty() {
                    return Err(bad("seed list is empty"));
                }
            }
            "qk_norm" => self.qk_norm = parse_bool(value).ok_or_else(|| bad("not a bool"))?,
            "k_smooth" => self.k_smooth = parse_bool(value).ok_or_else(|| bad("not a bool"))?,
            "q_smooth" => self.q_smooth = parse_bool(value).ok_or_else(|| bad("not a bool"))?,
            "policy" => self.apply_policy_spec(value)?,
            other => {
                return Err(Error::UnknownConfigKey {
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Overrides individual sites from a `site=tag,...` spec
    /// (e.g. `qk=exact,dp=fp16-emulated`). Unlisted sites keep their tag.
    pub fn apply_policy_spec(&mut self, spec: &str) -> Result<()> {
        for part in spec.split(',') {
            let part = part.trim();
            if part.is_empty() {
                continue;
            }
            let bad = |reason: &str| Error::InvalidConfigValue {
                key: "policy".to_string(),
                value: part.to_string(),
                reason: reason.to_string(),
            };
            let (site, tag) = part.split_once('=').ok_or_else(|| bad("expected site=tag"))?;
            let tag = Precision::parse(tag.trim()).ok_or_else(|| {
                bad("tag must be one of exact, int8-per-block, int8-per-token, fp16-emulated")
            })?;
            match site.trim() {
                "qk" => self.policy.qk = tag,
                "pv" => self.policy.pv = tag,
                "dv" => self.policy.dv = tag,
                "dp" => self.policy.dp = tag,
                "dq" => self.policy.dq = tag,
                "dk" => self.policy.dk = tag,
                _ => return Err(bad("site must be one of qk, pv, dv, dp, dq, dk")),
            }
        }
        Ok(())
    }

    /// Re-aligns the policy's block fields with the config's tile sizes.
    pub fn normalize(&mut self) {
        self.policy = self.policy.clone().with_blocks(self.block_q, self.block_kv);
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.head_dim == 0 {
            return Err(Error::EmptyInput { what: "seq_len/head_dim" });
        }
        if self.seeds.is_empty() {
            return Err(Error::EmptyInput { what: "seeds" });
        }
        for block in [self.block_q, self.block_kv] {
            if block == 0 || self.seq_len % block != 0 {
                return Err(Error::NonDivisibleBlock {
                    len: self.seq_len,
                    block,
                });
            }
        }
        let mut resolved = self.clone();
        resolved.normalize();
        resolved.policy.validate()
    }

    pub fn tiling(&self) -> TilingConfig {
        TilingConfig::new(self.block_q, self.block_kv, self.policy.clone())
    }

    /// Compact one-line echo embedded in every result row.
    pub fn echo(&self) -> String {
        let policy = self
            .policy
            .sites()
            .iter()
            .map(|(site, tag)| format!("{site}={tag}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "seq_len={};head_dim={};block_q={};block_kv={};sigma_q={};sigma_k={};sigma_v={};sigma_do={};seeds={};qk_norm={};k_smooth={};q_smooth={};policy={}",
            self.seq_len,
            self.head_dim,
            self.block_q,
            self.block_kv,
            self.sigma_q,
            self.sigma_k,
            self.sigma_v,
            self.sigma_do,
            self.seeds.len(),
            self.qk_norm,
            self.k_smooth,
            self.q_smooth,
            policy,
        )
    }

    /// Sidecar metadata: experiment id, full resolved config, RNG algorithm,
    /// and lab version, as pretty JSON.
    pub fn metadata_json(
        &self,
        experiment: &str,
        extra: &[(&str, serde_json::Value)],
    ) -> Result<String> {
        let mut doc = serde_json::Map::new();
        doc.insert("experiment".into(), experiment.into());
        doc.insert("lab_version".into(), LAB_VERSION.into());
        doc.insert("rng_algorithm".into(), RNG_ALGORITHM.into());
        doc.insert("config".into(), serde_json::to_value(self)?);
        for (k, v) in extra {
            doc.insert((*k).into(), v.clone());
        }
        let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
        text.push('\n');
        Ok(text)
    }
}

fn parse_sigma(value: &str) -> Option<f64> {
    let v: f64 = value.parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v)
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" | "1" | "on" => Some(true),
        "false" | "0" | "off" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds.len(), 20);
        assert_eq!(cfg.policy.dp, Precision::Fp16Emulated);
        assert_eq!(cfg.policy.pv, Precision::Int8PerToken);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = std::env::temp_dir().join("sagebwd-config-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("lab.cfg");
        std::fs::write(
            &path,
            "# comment\nseq_len = 128\nhead_dim = 32\nblock_q = 32\nblock_kv = 32\n\
             seeds = 3, 5, 9\nsigma_q = 2.5\nq_smooth = true\npolicy = qk=exact,dp=exact\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seq_len, 128);
        assert_eq!(cfg.seeds, vec![3, 5, 9]);
        assert_eq!(cfg.sigma_q, 2.5);
        assert!(cfg.q_smooth);
        assert_eq!(cfg.policy.qk, Precision::Exact);
        assert_eq!(cfg.policy.dp, Precision::Exact);
        assert_eq!(cfg.policy.dq, Precision::Int8PerBlock);
        assert_eq!(cfg.policy.block_q, 32);
    }

    #[test]
    fn unknown_config_key_is_an_error() {
        let mut cfg = ExperimentConfig::default();
        let err = cfg.set("warmup_steps", "100").unwrap_err();
        assert!(matches!(err, Error::UnknownConfigKey { .. }));
    }

    #[test]
    fn bad_policy_specs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_policy_spec("qk=int4").is_err());
        assert!(cfg.apply_policy_spec("qv=exact").is_err());
        assert!(cfg.apply_policy_spec("dp").is_err());
    }

    #[test]
    fn validate_rejects_ragged_blocks() {
        let mut cfg = ExperimentConfig::default();
        cfg.seq_len = 100;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn echo_is_stable() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.echo(), cfg.echo());
        assert!(cfg.echo().contains("sigma_q=1"));
        assert!(cfg.echo().contains("policy=qk=int8-per-block"));
    }
}
