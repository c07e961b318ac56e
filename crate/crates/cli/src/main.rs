//! CLI for the INT8 attention lab.
//!
//! Four subcommands map onto the experiment runners: `sweep-qkstd`,
//! `trace-components`, `bound-check`, and `ablate-smoothing`. Options come
//! from an optional flat `key = value` config file plus flag overrides;
//! tables go to stdout or `--out` (CSV or JSON) with a JSON metadata sidecar.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sagebwd::experiments::{
    render_bound_summary, render_rows, run_bound_check, run_smoothing_ablation, run_sweep_qkstd,
    run_trace_components, ExperimentConfig, OutputFormat,
};

/// Numerics lab for trainable INT8 attention: runs the tiled quantized kernel
/// and its pseudo-quantized variant against a full-precision oracle on
/// synthetic Gaussian inputs and reports per-tensor error tables.
///
/// The lab analyzes single forward/backward passes. Training loops,
/// tokens-per-step schedules, and kernel speed benchmarks are out of scope.
#[derive(Parser)]
#[command(name = "sagebwd", version, about, long_about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep sigma_Q = sigma_K and compare the tiled kernel with the oracle.
    SweepQkstd {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated sigma values for the sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,3,5,8,10")]
        sigma_list: Vec<f64>,
    },
    /// Trace every intermediate tensor of a pseudo-quantized run.
    TraceComponents {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Verify the dS magnitude bound over many oracle traces.
    BoundCheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of random instances to check.
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
    /// Compare no smoothing, K-smoothing, and Q+K smoothing side by side.
    AblateSmoothing {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file applied before flag overrides.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Sequence length N.
    #[arg(long)]
    seq_len: Option<usize>,

    /// Head dimension D.
    #[arg(long)]
    head_dim: Option<usize>,

    /// Q tile rows.
    #[arg(long)]
    block_q: Option<usize>,

    /// K/V tile rows.
    #[arg(long)]
    block_kv: Option<usize>,

    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,

    /// Standard deviation of Q entries.
    #[arg(long)]
    sigma_q: Option<f64>,

    /// Standard deviation of K entries.
    #[arg(long)]
    sigma_k: Option<f64>,

    /// Standard deviation of V entries.
    #[arg(long)]
    sigma_v: Option<f64>,

    /// Standard deviation of dO entries.
    #[arg(long)]
    sigma_do: Option<f64>,

    /// Disable K-smoothing (on by default).
    #[arg(long)]
    no_k_smooth: bool,

    /// Enable block-wise Q-smoothing.
    #[arg(long)]
    q_smooth: bool,

    /// Apply per-token RMS normalization to Q and K before everything else.
    #[arg(long)]
    qk_norm: bool,

    /// Per-site precision overrides, e.g. `qk=exact,dp=fp16-emulated`.
    /// Sites: qk, pv, dv, dp, dq, dk. Tags: exact, int8-per-block,
    /// int8-per-token (pv only), fp16-emulated.
    #[arg(long)]
    policy: Option<String>,

    /// Output file; stdout when omitted. A `<out>.meta.json` sidecar records
    /// the resolved config (printed to stderr when writing to stdout).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Output format.
    #[arg(long, default_value = "csv")]
    format: String,
}

impl CommonArgs {
    fn resolve(&self) -> anyhow::Result<(ExperimentConfig, OutputFormat)> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.seq_len {
            cfg.seq_len = v;
        }
        if let Some(v) = self.head_dim {
            cfg.head_dim = v;
        }
        if let Some(v) = self.block_q {
            cfg.block_q = v;
        }
        if let Some(v) = self.block_kv {
            cfg.block_kv = v;
        }
        if let Some(v) = &self.seeds {
            if v.is_empty() {
                bail!("--seeds needs at least one seed");
            }
            cfg.seeds = v.clone();
        }
        if let Some(v) = self.sigma_q {
            cfg.sigma_q = v;
        }
        if let Some(v) = self.sigma_k {
            cfg.sigma_k = v;
        }
        if let Some(v) = self.sigma_v {
            cfg.sigma_v = v;
        }
        if let Some(v) = self.sigma_do {
            cfg.sigma_do = v;
        }
        if self.no_k_smooth {
            cfg.k_smooth = false;
        }
        if self.q_smooth {
            cfg.q_smooth = true;
        }
        if self.qk_norm {
            cfg.qk_norm = true;
        }
        if let Some(spec) = &self.policy {
            cfg.apply_policy_spec(spec)?;
        }
        cfg.normalize();
        cfg.validate()?;
        let format = OutputFormat::parse(&self.format)
            .with_context(|| format!("unknown format `{}` (use csv or json)", self.format))?;
        Ok((cfg, format))
    }

    fn emit(&self, table: String, metadata: String) -> anyhow::Result<()> {
        match &self.out {
            Some(path) => {
                std::fs::write(path, table)
                    .with_context(|| format!("writing {}", path.display()))?;
                let mut sidecar = path.as_os_str().to_owned();
                sidecar.push(".meta.json");
                let sidecar = PathBuf::from(sidecar);
                std::fs::write(&sidecar, metadata)
                    .with_context(|| format!("writing {}", sidecar.display()))?;
            }
            None => {
                std::io::stdout().write_all(table.as_bytes())?;
                std::io::stderr().write_all(metadata.as_bytes())?;
            }
        }
        Ok(())
    }
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::SweepQkstd { common, sigma_list } => {
            let (cfg, format) = common.resolve()?;
            let rows = run_sweep_qkstd(&cfg, &sigma_list)?;
            let table = render_rows(&rows, format)?;
            let sigmas = serde_json::to_value(&sigma_list)?;
            let metadata = cfg.metadata_json("sweep-qkstd", &[("sigma_list", sigmas)])?;
            common.emit(table, metadata)
        }
        Command::TraceComponents { common } => {
            let (cfg, format) = common.resolve()?;
            let rows = run_trace_components(&cfg)?;
            let table = render_rows(&rows, format)?;
            let metadata = cfg.metadata_json("trace-components", &[])?;
            common.emit(table, metadata)
        }
        Command::BoundCheck { common, trials } => {
            let (cfg, format) = common.resolve()?;
            let summary = run_bound_check(&cfg, trials)?;
            let table = render_bound_summary(&summary.to_row(&cfg), format)?;
            let metadata = cfg.metadata_json("bound-check", &[("trials", trials.into())])?;
            common.emit(table, metadata)
        }
        Command::AblateSmoothing { common } => {
            let (cfg, format) = common.resolve()?;
            let rows = run_smoothing_ablation(&cfg)?;
            let table = render_rows(&rows, format)?;
            let metadata = cfg.metadata_json("ablate-smoothing", &[])?;
            common.emit(table, metadata)
        }
    }
}
