//! Per-stage runtime breakdown.

use std::time::Duration;

use serde::Serialize;

use crate::harness::pipeline::SampleOutcome;
use crate::refine::Module;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub stage: String,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub samples: usize,
}

fn row(stage: &str, durations: &[Duration]) -> TimingRow {
    let ms: Vec<f64> = durations.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    TimingRow {
        stage: stage.to_string(),
        mean_ms: if ms.is_empty() {
            0.0
        } else {
            ms.iter().sum::<f64>() / ms.len() as f64
        },
        max_ms: ms.iter().copied().fold(0.0, f64::max),
        samples: ms.len(),
    }
}

/// Mean wall-clock per stage over a batch. Every module has a row; modules
/// that did not run report zero samples.
pub fn time_report(outcomes: &[SampleOutcome]) -> Vec<TimingRow> {
    let mut rows = vec![row(
        "attribution_io",
        &outcomes
            .iter()
            .map(|o| o.times.attribution_io)
            .collect::<Vec<_>>(),
    )];
    for m in Module::ALL {
        let d: Vec<Duration> = outcomes
            .iter()
            .flat_map(|o| {
                o.times
                    .modules
                    .iter()
                    .filter(|(x, _)| *x == m)
                    .map(|(_, d)| *d)
            })
            .collect();
        rows.push(row(m.as_str(), &d));
    }
    rows.push(row(
        "metrics",
        &outcomes.iter().map(|o| o.times.metrics).collect::<Vec<_>>(),
    ));
    rows.push(row(
        "total_post_processing",
        &outcomes
            .iter()
            .map(|o| o.times.modules.iter().map(|(_, d)| *d).sum())
            .collect::<Vec<_>>(),
    ));
    rows
}
