//! Grids over server learning rate, clip setting and noise multiplier.
//!
//! For every `(clip setting, z)` pair the sweep keeps the server learning
//! rate multiplier with the best validation metric averaged over the last
//! `window` rounds. Ties go to the smaller multiplier.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::TaskData;
use crate::error::{Error, Result};
use crate::federation::RoundRecord;
use crate::models::higher_metric_is_better;
use crate::quantile::QuantileConfig;
use crate::rng::salted_seed;

use super::config::{validate_value, ClipConfig, RunConfig};
use super::metrics::{format_float, write_run_outputs};

pub const DEFAULT_WINDOW: u64 = 100;
/// Rounds before the first one whose unclipped fraction is this close to
/// the target quantile are treated as warmup.
pub const WARMUP_TOLERANCE: f64 = 0.05;

pub fn default_server_lr_multipliers() -> Vec<f64> {
    vec![1.0, 10f64.powf(0.25), 10f64.powf(0.5), 10f64.powf(0.75), 10.0]
}

pub fn default_quantiles() -> Vec<f64> {
    vec![0.1, 0.3, 0.5, 0.7, 0.9]
}

pub fn default_noise_multipliers() -> Vec<f64> {
    vec![0.0, 0.01, 0.03, 0.1]
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixedClips {
    None,
    List(Vec<f64>),
    /// Five log-spaced clips spanning the post-warmup range of the noiseless
    /// adaptive runs at quantiles 0.1 and 0.9.
    Auto,
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub server_lr_multipliers: Vec<f64>,
    pub quantiles: Vec<f64>,
    pub fixed_clips: FixedClips,
    pub noise_multipliers: Vec<f64>,
    pub window: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    base: Value,
    server_lr_multipliers: Option<Vec<f64>>,
    quantiles: Option<Vec<f64>>,
    fixed_clips: Option<RawFixed>,
    noise_multipliers: Option<Vec<f64>>,
    window: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawFixed {
    List(Vec<f64>),
    Keyword(String),
}

impl SweepSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawSweep = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::config(e.path().to_string(), e.into_inner().to_string()))?;
        let base = validate_value(&raw.base).map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("base.{path}"), message),
            other => other,
        })?;
        let fixed_clips = match raw.fixed_clips {
            None => FixedClips::None,
            Some(RawFixed::List(v)) => FixedClips::List(v),
            Some(RawFixed::Keyword(k)) if k == "auto" => FixedClips::Auto,
            Some(RawFixed::Keyword(k)) => {
                return Err(Error::config("fixed_clips", format!("expected a list or \"auto\", got {k:?}")))
            }
        };
        let spec = SweepSpec {
            base: base.config,
            server_lr_multipliers: raw
                .server_lr_multipliers
                .unwrap_or_else(default_server_lr_multipliers),
            quantiles: raw.quantiles.unwrap_or_else(default_quantiles),
            fixed_clips,
            noise_multipliers: raw.noise_multipliers.unwrap_or_else(default_noise_multipliers),
            window: raw.window.unwrap_or(DEFAULT_WINDOW),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.server_lr_multipliers.is_empty() || self.noise_multipliers.is_empty() {
            return Err(Error::config("", "sweep grids must be non-empty"));
        }
        if self.server_lr_multipliers.iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(Error::config("server_lr_multipliers", "multipliers must be positive"));
        }
        if self.noise_multipliers.iter().any(|z| !(*z >= 0.0 && z.is_finite())) {
            return Err(Error::config("noise_multipliers", "must be finite and >= 0"));
        }
        if self.quantiles.iter().any(|g| !(0.0..=1.0).contains(g)) {
            return Err(Error::config("quantiles", "must lie in [0, 1]"));
        }
        if let FixedClips::List(v) = &self.fixed_clips {
            if v.iter().any(|c| !(*c > 0.0 && c.is_finite())) {
                return Err(Error::config("fixed_clips", "clips must be positive"));
            }
        }
        let no_fixed = matches!(&self.fixed_clips, FixedClips::None)
            || matches!(&self.fixed_clips, FixedClips::List(v) if v.is_empty());
        if self.quantiles.is_empty() && no_fixed {
            return Err(Error::config("quantiles", "no clip settings to sweep"));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be >= 1"));
        }
        Ok(())
    }

    fn adaptive_template(&self) -> QuantileConfig {
        match self.base.clip {
            ClipConfig::Adaptive(q) => q,
            _ => QuantileConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub index: usize,
    pub clip: ClipConfig,
    pub z: f64,
    pub z_delta: f64,
    pub multiplier: f64,
    pub eta_s: f64,
    pub window_metric: f64,
    pub window_loss: f64,
    pub final_clip: f64,
    pub records: Vec<RoundRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub clip: String,
    pub z: f64,
    pub z_delta: f64,
    pub best_multiplier: f64,
    pub eta_s: f64,
    pub metric: f64,
    pub loss: f64,
    pub final_clip: f64,
    pub cell: usize,
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
    pub fixed_clips: Vec<f64>,
    pub higher_is_better: bool,
}

impl SweepSummary {
    pub fn row(&self, clip_label: &str, z: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.clip == clip_label && r.z == z)
    }
}

/// Mean eval metric and loss over records in the last `window` rounds
/// (clamped to the run length). Falls back to the last evaluation when the
/// window holds none.
pub fn window_average(records: &[RoundRecord], window: u64) -> Option<(f64, f64)> {
    let total = records.len() as u64;
    let start = total.saturating_sub(window.min(total));
    let evals: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.round >= start)
        .filter_map(|r| Some((r.eval_metric?, r.eval_loss?)))
        .collect();
    if evals.is_empty() {
        return records
            .iter()
            .rev()
            .find_map(|r| Some((r.eval_metric?, r.eval_loss?)));
    }
    let n = evals.len() as f64;
    Some((
        evals.iter().map(|e| e.0).sum::<f64>() / n,
        evals.iter().map(|e| e.1).sum::<f64>() / n,
    ))
}

/// Index of the first round whose exact unclipped fraction is within
/// `tolerance` of `gamma`.
pub fn warmup_end(records: &[RoundRecord], gamma: f64, tolerance: f64) -> Option<usize> {
    records
        .iter()
        .position(|r| matches!(r.frac_below_exact, Some(f) if (f - gamma).abs() <= tolerance))
}

/// `count` values log-spaced from `lo` to `hi` inclusive.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let ratio = (hi / lo).ln();
    (0..count)
        .map(|k| lo * (ratio * k as f64 / (count - 1) as f64).exp())
        .collect()
}

/// Fixed-clip grid from two noiseless adaptive runs: the smallest
/// post-warmup clip of the low-quantile run to the largest post-warmup clip
/// of the high-quantile run.
pub fn fixed_clip_grid(
    low: &[RoundRecord],
    low_gamma: f64,
    high: &[RoundRecord],
    high_gamma: f64,
    count: usize,
) -> Result<Vec<f64>> {
    let lo_start = warmup_end(low, low_gamma, WARMUP_TOLERANCE).ok_or_else(|| {
        Error::InvalidArgument(format!("quantile {low_gamma} run never left warmup"))
    })?;
    let hi_start = warmup_end(high, high_gamma, WARMUP_TOLERANCE).ok_or_else(|| {
        Error::InvalidArgument(format!("quantile {high_gamma} run never left warmup"))
    })?;
    let lo = low[lo_start..]
        .iter()
        .map(|r| r.clip_before)
        .fold(f64::INFINITY, f64::min);
    let hi = high[hi_start..]
        .iter()
        .map(|r| r.clip_before)
        .fold(f64::NEG_INFINITY, f64::max);
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidArgument(format!(
            "degenerate fixed clip range [{lo}, {hi}]"
        )));
    }
    Ok(log_spaced(lo, hi, count))
}

struct Cell {
    index: usize,
    clip: ClipConfig,
    z: f64,
    multiplier: f64,
    config: RunConfig,
}

fn build_cell(spec: &SweepSpec, index: usize, clip: ClipConfig, z: f64, multiplier: f64) -> Result<Cell> {
    let mut config = spec.base.clone();
    config.eta_s = spec.base.eta_s * multiplier;
    config.z = z;
    config.clip = clip;
    config.master_seed = salted_seed(spec.base.master_seed, index as u64);
    config.workers = 1;
    config.output_dir = None;
    let config = config.revalidated().map_err(|e| match e {
        Error::Config { path, message } => {
            Error::config(path, format!("cell {index} ({}, z = {z}): {message}", clip.label()))
        }
        other => other,
    })?;
    Ok(Cell {
        index,
        clip,
        z,
        multiplier,
        config,
    })
}

fn run_cells(
    cells: &[Cell],
    task: &TaskData,
    window: u64,
    out_dir: Option<&Path>,
) -> Vec<Result<CellResult>> {
    cells
        .par_iter()
        .map(|cell| {
            let output = super::config::run(&cell.config, task)?;
            if let Some(dir) = out_dir {
                let cell_dir = dir.join("cells").join(format!("cell_{:03}", cell.index));
                write_run_outputs(&cell_dir, &cell.config, &[], &output)?;
            }
            let (metric, loss) = window_average(&output.records, window).unwrap_or((f64::NAN, f64::NAN));
            Ok(CellResult {
                index: cell.index,
                clip: cell.clip,
                z: cell.z,
                z_delta: cell.config.privacy.z_delta,
                multiplier: cell.multiplier,
                eta_s: cell.config.eta_s,
                window_metric: metric,
                window_loss: loss,
                final_clip: output.records.last().map(|r| r.clip_after).unwrap_or(cell.config.clip.mode().initial_clip()),
                records: output.records,
            })
        })
        .collect()
}

fn better(a: f64, b: f64, higher_is_better: bool) -> bool {
    if b.is_nan() {
        return !a.is_nan();
    }
    if higher_is_better {
        a > b
    } else {
        a < b
    }
}

fn summarize(cells: &[CellResult], higher_is_better: bool) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut best: Vec<&CellResult> = Vec::new();
    for cell in cells {
        let label = cell.clip.label();
        match rows.iter().position(|r| r.clip == label && r.z == cell.z) {
            None => {
                rows.push(SummaryRow {
                    clip: label,
                    z: cell.z,
                    z_delta: cell.z_delta,
                    best_multiplier: cell.multiplier,
                    eta_s: cell.eta_s,
                    metric: cell.window_metric,
                    loss: cell.window_loss,
                    final_clip: cell.final_clip,
                    cell: cell.index,
                });
                best.push(cell);
            }
            Some(i) => {
                let cur = best[i];
                let wins = better(cell.window_metric, cur.window_metric, higher_is_better)
                    || (cell.window_metric == cur.window_metric && cell.multiplier < cur.multiplier);
                if wins {
                    best[i] = cell;
                    rows[i] = SummaryRow {
                        clip: rows[i].clip.clone(),
                        z: cell.z,
                        z_delta: cell.z_delta,
                        best_multiplier: cell.multiplier,
                        eta_s: cell.eta_s,
                        metric: cell.window_metric,
                        loss: cell.window_loss,
                        final_clip: cell.final_clip,
                        cell: cell.index,
                    };
                }
            }
        }
    }
    rows
}

pub const SUMMARY_HEADER: &str = "clip,z,z_delta,best_multiplier,eta_s,metric,loss,final_clip,cell";

pub fn summary_csv_string(rows: &[SummaryRow]) -> String {
    let mut s = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.clip,
            format_float(r.z),
            format_float(r.z_delta),
            format_float(r.best_multiplier),
            format_float(r.eta_s),
            format_float(r.metric),
            format_float(r.loss),
            format_float(r.final_clip),
            r.cell
        ));
    }
    s
}

fn write_summary(dir: &Path, summary: &SweepSummary, complete: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("summary.csv"), summary_csv_string(&summary.rows))?;
    let doc = json!({
        "complete": complete,
        "higher_is_better": summary.higher_is_better,
        "fixed_clips": summary.fixed_clips,
        "rows": summary.rows,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&doc)?)?;
    Ok(())
}

/// Runs the grid. `workers` bounds the number of cells in flight. When
/// `out_dir` is set, every finished cell writes its own metrics and the
/// summary is written even if a later cell fails.
pub fn run_sweep(
    spec: &SweepSpec,
    task: &TaskData,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<SweepSummary> {
    spec.validate()?;
    let higher = higher_metric_is_better(&spec.base.model);
    let template = spec.adaptive_template();
    let adaptive: Vec<ClipConfig> = spec
        .quantiles
        .iter()
        .map(|&gamma| ClipConfig::Adaptive(QuantileConfig { gamma, ..template }))
        .collect();

    let mut multipliers = spec.server_lr_multipliers.clone();
    multipliers.sort_by(f64::total_cmp);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;

    let build = |clips: &[ClipConfig], first_index: usize| -> Result<Vec<Cell>> {
        let mut cells = Vec::new();
        for &z in &spec.noise_multipliers {
            for &clip in clips {
                for &m in &multipliers {
                    cells.push(build_cell(spec, first_index + cells.len(), clip, z, m)?);
                }
            }
        }
        Ok(cells)
    };

    let mut first_phase_clips = adaptive.clone();
    if let FixedClips::List(list) = &spec.fixed_clips {
        first_phase_clips.extend(list.iter().map(|&c| ClipConfig::Fixed(c)));
    }
    let phase_one = build(&first_phase_clips, 0)?;
    let mut results = Vec::new();
    let mut failure = None;
    for r in pool.install(|| run_cells(&phase_one, task, spec.window, out_dir)) {
        match r {
            Ok(c) => results.push(c),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
    }

    let mut fixed_used: Vec<f64> = match &spec.fixed_clips {
        FixedClips::List(v) => v.clone(),
        _ => Vec::new(),
    };
    if failure.is_none() && spec.fixed_clips == FixedClips::Auto {
        let best_noiseless = |gamma: f64| -> Result<&CellResult> {
            let rows = summarize(&results, higher);
            let label = ClipConfig::Adaptive(QuantileConfig { gamma, ..template }).label();
            let row = rows
                .iter()
                .find(|r| r.clip == label && r.z == 0.0)
                .ok_or_else(|| {
                    Error::config(
                        "fixed_clips",
                        "\"auto\" needs quantiles 0.1 and 0.9 and noise multiplier 0 in the grid",
                    )
                })?;
            Ok(results.iter().find(|c| c.index == row.cell).expect("row refers to a cell"))
        };
        match (best_noiseless(0.1), best_noiseless(0.9)) {
            (Ok(low), Ok(high)) => {
                match fixed_clip_grid(&low.records, 0.1, &high.records, 0.9, 5) {
                    Ok(grid) => fixed_used = grid,
                    Err(e) => failure = Some(e),
                }
            }
            (Err(e), _) | (_, Err(e)) => failure = Some(e),
        }
        if failure.is_none() {
            let clips: Vec<ClipConfig> = fixed_used.iter().map(|&c| ClipConfig::Fixed(c)).collect();
            match build(&clips, phase_one.len()) {
                Ok(phase_two) => {
                    for r in pool.install(|| run_cells(&phase_two, task, spec.window, out_dir)) {
                        match r {
                            Ok(c) => results.push(c),
                            Err(e) => {
                                failure.get_or_insert(e);
                            }
                        }
                    }
                }
                Err(e) => failure = Some(e),
            }
        }
    }

    results.sort_by_key(|c| c.index);
    let summary = SweepSummary {
        rows: summarize(&results, higher),
        cells: results,
        fixed_clips: fixed_used,
        higher_is_better: higher,
    };
    if let Some(dir) = out_dir {
        write_summary(dir, &summary, failure.is_none())?;
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
