//! CSV report tables.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::pipeline::BatchReport;
use crate::metrics::MetricSummary;
use crate::refine::RoutingCounts;

/// One `summary.csv` row: mean and std per metric, percentages, and the
/// gating routing split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub config: String,
    pub count: usize,
    pub errors: usize,
    pub obj_iou_mean: f64,
    pub obj_iou_std: f64,
    pub contrast_mean: f64,
    pub contrast_std: f64,
    pub concentration_mean: f64,
    pub concentration_std: f64,
    pub f3_mean: f64,
    pub f3_std: f64,
    pub f3_aggregate: f64,
    pub obj_iou_pct: f64,
    pub concentration_pct: f64,
    pub f3_pct: f64,
    pub high_var: f64,
    pub high_mean: f64,
    pub low_mean: f64,
    pub default: f64,
}

impl SummaryRow {
    pub fn new(
        config: &str,
        summary: &MetricSummary,
        routing: &RoutingCounts,
        errors: usize,
    ) -> Self {
        let [high_var, high_mean, low_mean, default] = routing.percentages();
        Self {
            config: config.to_string(),
            count: summary.count,
            errors,
            obj_iou_mean: summary.obj_iou.mean,
            obj_iou_std: summary.obj_iou.std,
            contrast_mean: summary.contrast.mean,
            contrast_std: summary.contrast.std,
            concentration_mean: summary.concentration.mean,
            concentration_std: summary.concentration.std,
            f3_mean: summary.f3.mean,
            f3_std: summary.f3.std,
            f3_aggregate: summary.f3_aggregate,
            obj_iou_pct: 100.0 * summary.obj_iou.mean,
            concentration_pct: 100.0 * summary.concentration.mean,
            f3_pct: 100.0 * summary.f3.mean,
            high_var,
            high_mean,
            low_mean,
            default,
        }
    }

    pub fn of(config: &str, batch: &BatchReport) -> Self {
        Self::new(config, &batch.summary, &batch.routing, batch.error_count())
    }
}

/// Serializes rows as CSV with a header line.
pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    crate::harness::pipeline::write_text(path, &to_csv(rows)?)
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    write_csv(path, rows)
}
