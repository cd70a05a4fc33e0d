//! Caption-variant comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::VariantLabel;
use crate::error::{Error, Result};
use crate::metrics::{Metric, MetricReport, MetricSummary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub label: VariantLabel,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    /// One row per label, concise first.
    pub rows: Vec<VariantRow>,
    /// Per metric: concise >= original >= verbose >= repeated on means.
    pub monotone: BTreeMap<String, bool>,
}

impl VariantReport {
    pub fn is_monotone(&self, metric: Metric) -> bool {
        self.monotone[metric.as_str()]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["variant".to_string(), "count".to_string()];
        header.extend(Metric::ALL.iter().map(|m| m.as_str().to_string()));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.to_string(), r.summary.count.to_string()];
            rec.extend(
                Metric::ALL
                    .iter()
                    .map(|m| r.summary.get(*m).mean.to_string()),
            );
            w.write_record(&rec)?;
        }
        let mut rec = vec!["monotone".to_string(), String::new()];
        rec.extend(Metric::ALL.iter().map(|m| self.is_monotone(*m).to_string()));
        w.write_record(&rec)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Groups reports by variant label. Every report must be labeled and all
/// four labels must be present.
pub fn variant_report<'a>(
    reports: impl IntoIterator<Item = (Option<VariantLabel>, &'a MetricReport)>,
) -> Result<VariantReport> {
    let mut groups: BTreeMap<VariantLabel, Vec<MetricReport>> = BTreeMap::new();
    for (label, report) in reports {
        let label = label.ok_or(Error::NoVariants)?;
        groups.entry(label).or_default().push(report.clone());
    }
    if VariantLabel::ALL.iter().any(|l| !groups.contains_key(l)) {
        return Err(Error::NoVariants);
    }
    let rows: Vec<VariantRow> = VariantLabel::ALL
        .iter()
        .map(|l| VariantRow {
            label: *l,
            summary: MetricSummary::of(&groups[l]),
        })
        .collect();
    let monotone = Metric::ALL
        .iter()
        .map(|m| {
            let ok = rows
                .windows(2)
                .all(|p| p[0].summary.get(*m).mean >= p[1].summary.get(*m).mean);
            (m.as_str().to_string(), ok)
        })
        .collect();
    Ok(VariantReport { rows, monotone })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::f3_score;

    fn report(q: f64) -> MetricReport {
        MetricReport {
            sample_id: String::new(),
            obj_iou: q,
            contrast: 20.0 * q,
            concentration: q,
            f3: f3_score(q, 20.0 * q, q),
            per_class_iou: BTreeMap::new(),
            otsu_threshold: 0.5,
        }
    }

    #[test]
    fn injected_monotone_quality() {
        let reps: Vec<(Option<VariantLabel>, MetricReport)> = VariantLabel::ALL
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                (0..3).map(move |j| (Some(*l), report(0.8 - 0.1 * i as f64 - 0.01 * j as f64)))
            })
            .collect();
        let r = variant_report(reps.iter().map(|(l, m)| (*l, m))).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[0].label, VariantLabel::Concise);
        assert!(Metric::ALL.iter().all(|m| r.is_monotone(*m)));
        assert!(r
            .to_csv()
            .unwrap()
            .lines()
            .last()
            .unwrap()
            .starts_with("monotone,,true"));

        let mut swapped = reps.clone();
        swapped[0].1 = report(0.1);
        swapped[1].1 = report(0.1);
        swapped[2].1 = report(0.1);
        let r = variant_report(swapped.iter().map(|(l, m)| (*l, m))).unwrap();
        assert!(!r.is_monotone(Metric::ObjIou));
    }

    #[test]
    fn missing_labels() {
        let m = report(0.5);
        assert!(matches!(
            variant_report([(None, &m)]),
            Err(Error::NoVariants)
        ));
        assert!(matches!(
            variant_report([(Some(VariantLabel::Concise), &m)]),
            Err(Error::NoVariants)
        ));
        assert!(matches!(
            variant_report(std::iter::empty()),
            Err(Error::NoVariants)
        ));
    }
}
