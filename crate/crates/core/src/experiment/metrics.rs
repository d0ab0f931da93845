//! CSV and JSON sinks for per-round records.

use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::Result;
use crate::federation::{RoundRecord, TrainOutput};

use super::config::RunConfig;

pub const METRICS_HEADER: &str = "round,clip_before,clip_after,frac_below_exact,frac_below_noisy,mean_preclip_norm,eval_loss,eval_metric,sampled_count";

/// 17 significant digits, enough to round-trip any f64.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn format_opt(v: Option<f64>) -> String {
    v.map(format_float).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(mut out: W, records: &[RoundRecord]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            format_float(r.clip_before),
            format_float(r.clip_after),
            format_opt(r.frac_below_exact),
            format_float(r.frac_below_noisy),
            format_opt(r.mean_preclip_norm),
            format_opt(r.eval_loss),
            format_opt(r.eval_metric),
            r.sampled_count,
        )?;
    }
    out.flush()?;
    Ok(())
}

pub fn metrics_csv_string(records: &[RoundRecord]) -> String {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, records).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("metrics CSV is ASCII")
}

/// JSON mirror of the records with the config echo and the resolved noise
/// split.
pub fn metrics_json(cfg: &RunConfig, defaulted: &[String], records: &[RoundRecord]) -> Value {
    json!({
        "config": cfg.to_document(),
        "resolved": {
            "z": cfg.privacy.z,
            "z_delta": cfg.privacy.z_delta,
            "sigma_b": cfg.privacy.sigma_b,
            "expected_clients": cfg.privacy.expected_clients(),
            "shifted_bits": cfg.privacy.shifted_bits,
        },
        "defaulted": defaulted,
        "records": records,
    })
}

/// Writes `metrics.csv`, `metrics.json` and `params.json` into `dir`.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &RunConfig,
    defaulted: &[String],
    output: &TrainOutput,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv = std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(csv, &output.records)?;
    let doc = metrics_json(cfg, defaulted, &output.records);
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&doc)?)?;
    std::fs::write(
        dir.join("params.json"),
        serde_json::to_string(&output.params)?,
    )?;
    Ok(())
}
