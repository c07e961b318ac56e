//! Deterministic rendering of experiment tables: CSV with a fixed header or a
//! JSON array of row objects. Floats carry 6 significant digits in both.

use serde::Serialize;

use crate::error::Result;

/// Output format for experiment tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(OutputFormat::Csv),
            "json" => Some(OutputFormat::Json),
            _ => None,
        }
    }
}

/// One aggregated result line: per-tensor metrics averaged over seeds.
#[derive(Debug, Clone, Serialize)]
pub struct ResultRow {
    pub experiment: String,
    pub config: String,
    pub tensor: String,
    pub cos_sim_mean: f64,
    pub cos_sim_std: f64,
    pub rel_l2_mean: f64,
    pub rel_l2_std: f64,
    pub seeds: usize,
    pub rng: String,
}

/// Summary row of the bound-check experiment.
#[derive(Debug, Clone, Serialize)]
pub struct BoundSummaryRow {
    pub experiment: String,
    pub config: String,
    pub trials: usize,
    pub violations: usize,
    pub min_margin: f64,
    pub rng: String,
}

/// Formats with 6 significant digits (`d.dddddE`), the precision used in all
/// rendered tables.
pub fn format_sig(x: f64) -> String {
    format!("{x:.5e}")
}

/// Rounds through the 6-significant-digit decimal representation so JSON
/// numbers print compactly.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format_sig(x).parse().unwrap_or(x)
}

/// Renders result rows as CSV (fixed header) or a JSON array.
pub fn render_rows(rows: &[ResultRow], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "experiment",
                "config",
                "tensor",
                "cos_sim_mean",
                "cos_sim_std",
                "rel_l2_mean",
                "rel_l2_std",
                "seeds",
                "rng",
            ])?;
            for r in rows {
                w.write_record([
                    r.experiment.as_str(),
                    r.config.as_str(),
                    r.tensor.as_str(),
                    &format_sig(r.cos_sim_mean),
                    &format_sig(r.cos_sim_std),
                    &format_sig(r.rel_l2_mean),
                    &format_sig(r.rel_l2_std),
                    &r.seeds.to_string(),
                    r.rng.as_str(),
                ])?;
            }
            Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8 csv"))
        }
        OutputFormat::Json => {
            let rounded: Vec<ResultRow> = rows
                .iter()
                .map(|r| ResultRow {
                    cos_sim_mean: round_sig(r.cos_sim_mean),
                    cos_sim_std: round_sig(r.cos_sim_std),
                    rel_l2_mean: round_sig(r.rel_l2_mean),
                    rel_l2_std: round_sig(r.rel_l2_std),
                    ..r.clone()
                })
                .collect();
            let mut text = serde_json::to_string_pretty(&rounded)?;
            text.push('\n');
            Ok(text)
        }
    }
}

/// Renders the bound-check summary as a one-row CSV or a JSON object.
pub fn render_bound_summary(row: &BoundSummaryRow, format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record([
                "experiment",
                "config",
                "trials",
                "violations",
                "min_margin",
                "rng",
            ])?;
            w.write_record([
                row.experiment.as_str(),
                row.config.as_str(),
                &row.trials.to_string(),
                &row.violations.to_string(),
                &format_sig(row.min_margin),
                row.rng.as_str(),
            ])?;
            Ok(String::from_utf8(w.into_inner().expect("vec writer")).expect("utf8 csv"))
        }
        OutputFormat::Json => {
            let mut doc = serde_json::Map::new();
            doc.insert("experiment".into(), row.experiment.clone().into());
            doc.insert("config".into(), row.config.clone().into());
            doc.insert("trials".into(), row.trials.into());
            doc.insert("violations".into(), row.violations.into());
            let margin = round_sig(row.min_margin);
            doc.insert(
                "min_margin".into(),
                serde_json::Number::from_f64(margin)
                    .map(serde_json::Value::Number)
                    // Infinite margin (all-zero dS) has no JSON number.
                    .unwrap_or(serde_json::Value::String(format_sig(row.min_margin))),
            );
            doc.insert("rng".into(), row.rng.clone().into());
            let mut text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
            text.push('\n');
            Ok(text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> ResultRow {
        ResultRow {
            experiment: "sweep-qkstd".into(),
            config: "seq_len=64".into(),
            tensor: "dQ".into(),
            cos_sim_mean: 0.999_876_543,
            cos_sim_std: 0.000_012_345,
            rel_l2_mean: 0.016_012_345,
            rel_l2_std: 0.001,
            seeds: 20,
            rng: "chacha8/marsaglia-polar".into(),
        }
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig(0.99987654), "9.99877e-1");
        assert_eq!(format_sig(0.0), "0.00000e0");
        assert_eq!(round_sig(0.016012345), 0.0160123);
        assert_eq!(round_sig(123456.789), 123457.0);
    }

    #[test]
    fn csv_has_expected_header_and_row() {
        let text = render_rows(&[sample_row()], OutputFormat::Csv).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "experiment,config,tensor,cos_sim_mean,cos_sim_std,rel_l2_mean,rel_l2_std,seeds,rng"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("sweep-qkstd,seq_len=64,dQ,9.99877e-1,"));
        assert!(row.ends_with("chacha8/marsaglia-polar"));
    }

    #[test]
    fn json_rows_parse_back() {
        let text = render_rows(&[sample_row()], OutputFormat::Json).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed[0]["tensor"], "dQ");
        assert_eq!(parsed[0]["rel_l2_mean"], 0.0160123);
    }

    #[test]
    fn rendering_is_deterministic() {
        let rows = vec![sample_row(), sample_row()];
        for fmt in [OutputFormat::Csv, OutputFormat::Json] {
            assert_eq!(
                render_rows(&rows, fmt).unwrap(),
                render_rows(&rows, fmt).unwrap()
            );
        }
    }
}
