//! One-at-a-time parameter sweeps.

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::harness::pipeline::{run_inputs, SampleInput};
use crate::harness::report::SummaryRow;
use crate::metrics::{Metric, MetricSummary};
use crate::refine::{Branch, RoutingCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Dotted config path such as `dacg.delta_sigma`.
    pub param: String,
    pub values: Vec<String>,
    pub metrics: Vec<Metric>,
    pub routing: bool,
}

impl SweepSpec {
    pub fn new(param: &str, values: &[&str]) -> Self {
        Self {
            param: param.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
            metrics: Metric::ALL.to_vec(),
            routing: true,
        }
    }

    /// Parses a comma-separated value list.
    pub fn parse_values(list: &str) -> Vec<String> {
        list.split(',')
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(String::from)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub summary: MetricSummary,
    pub routing: RoutingCounts,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub spec: SweepSpec,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.rows
            .iter()
            .map(|r| {
                SummaryRow::new(
                    &format!("{}={}", self.spec.param, r.value),
                    &r.summary,
                    &r.routing,
                    r.errors,
                )
            })
            .collect()
    }

    /// CSV with the value column, mean and std of the requested metrics and
    /// optionally the routing percentages.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "param".to_string(),
            "value".to_string(),
            "count".to_string(),
        ];
        for m in &self.spec.metrics {
            header.push(format!("{}_mean", m.as_str()));
            header.push(format!("{}_std", m.as_str()));
        }
        if self.spec.routing {
            header.extend(Branch::ALL.iter().map(|b| b.as_str().to_string()));
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                self.spec.param.clone(),
                r.value.clone(),
                r.summary.count.to_string(),
            ];
            for m in &self.spec.metrics {
                let s = r.summary.get(*m);
                rec.push(s.mean.to_string());
                rec.push(s.std.to_string());
            }
            if self.spec.routing {
                rec.extend(r.routing.percentages().iter().map(|p| p.to_string()));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Re-runs refinement and evaluation once per value of `spec.param`.
pub fn sweep(inputs: &[SampleInput], cfg: &PipelineConfig, spec: &SweepSpec) -> Result<SweepTable> {
    if spec.param.starts_with("attribution.") {
        return Err(Error::Config(
            "attribution parameters are fixed once the corpus is attributed".into(),
        ));
    }
    if spec.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let rows = spec
        .values
        .iter()
        .map(|v| {
            let batch = run_inputs(inputs, &cfg.with_param(&spec.param, v)?)?;
            Ok(SweepRow {
                value: v.clone(),
                errors: batch.error_count(),
                summary: batch.summary,
                routing: batch.routing,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        spec: spec.clone(),
        rows,
    })
}
