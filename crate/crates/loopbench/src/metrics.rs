//! Proximity and Stability metrics over conflict trajectories, plus
//! aggregation of repeated runs into summary-table rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A run's conflict trajectory.
///
/// `conf_initial` is measured before any decision round; `conf` holds the
/// post-decision counts for rounds `1..=T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictSeries {
    pub conf_initial: usize,
    pub conf: Vec<usize>,
    pub conf_best: usize,
}

impl ConflictSeries {
    pub fn new(conf_initial: usize, conf: Vec<usize>, conf_best: usize) -> Result<Self> {
        if conf.is_empty() {
            return Err(Error::InsufficientData("conflict series has no rounds".into()));
        }
        Ok(Self {
            conf_initial,
            conf,
            conf_best,
        })
    }
}

/// Trajectory-averaged normalized closeness to `conf_best`, as a percentage.
///
/// 100 means the run stayed at the theoretical optimum; 0 means it never left
/// the initial conflict level. Values above the initial level make this
/// negative.
pub fn proximity(s: &ConflictSeries) -> Result<f64> {
    if s.conf_initial <= s.conf_best {
        return Err(Error::DegenerateSeries {
            conf_initial: s.conf_initial,
            conf_best: s.conf_best,
        });
    }
    let denom = (s.conf_initial - s.conf_best) as f64;
    let t = s.conf.len() as f64;
    let mean_excess: f64 = s
        .conf
        .iter()
        .map(|&c| (c as f64 - s.conf_best as f64) / denom)
        .sum::<f64>()
        / t;
    Ok(100.0 - mean_excess * 100.0)
}

/// Percentage of round transitions that did not increase conflicts.
///
/// Only the post-decision series participates; `conf_initial` does not.
pub fn stability(s: &ConflictSeries) -> Result<f64> {
    let t = s.conf.len();
    if t < 2 {
        return Err(Error::InsufficientData(format!(
            "stability needs at least 2 rounds, got {t}"
        )));
    }
    let increases = s.conf.windows(2).filter(|w| w[1] > w[0]).count();
    Ok(100.0 - (increases as f64 / (t - 1) as f64) * 100.0)
}

/// One aggregated table row: per-metric mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub proximity_mean: f64,
    pub proximity_std: f64,
    pub stability_mean: f64,
    pub stability_std: f64,
    pub repeats: usize,
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Aggregates per-run `(proximity, stability)` pairs.
///
/// Sample (n-1) standard deviation, since repeat counts are small.
pub fn aggregate(rows: &[(f64, f64)]) -> Result<MetricsRow> {
    if rows.is_empty() {
        return Err(Error::InsufficientData("no runs to aggregate".into()));
    }
    let prox: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let stab: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let (proximity_mean, proximity_std) = mean_and_sample_std(&prox);
    let (stability_mean, stability_std) = mean_and_sample_std(&stab);
    Ok(MetricsRow {
        proximity_mean,
        proximity_std,
        stability_mean,
        stability_std,
        repeats: rows.len(),
    })
}

pub const CSV_HEADER: &str =
    "graph,agent,proximity_mean,proximity_std,stability_mean,stability_std,repeats";

/// Formats one CSV row with fixed 1-decimal metric columns.
pub fn csv_row(graph: &str, agent: &str, row: &MetricsRow) -> String {
    format!(
        "{},{},{:.1},{:.1},{:.1},{:.1},{}",
        graph,
        agent,
        row.proximity_mean,
        row.proximity_std,
        row.stability_mean,
        row.stability_std,
        row.repeats
    )
}
