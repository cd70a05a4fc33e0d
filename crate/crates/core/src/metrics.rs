//! Otsu binarization and the four-metric evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::GroundTruthMaskSet;
use crate::error::{Error, Result};
use crate::map::ActivationMap;

pub const EPSILON: f64 = 1e-6;
pub const OTSU_BINS: usize = 256;
/// Contrast at which the clipped contrast term saturates.
pub const CONTRAST_SATURATION: f64 = 20.0;

/// Histogram bin of a unit-interval value.
pub fn otsu_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1)
}

pub fn histogram(map: &ActivationMap) -> [u64; OTSU_BINS] {
    let mut hist = [0u64; OTSU_BINS];
    for v in map.values() {
        hist[otsu_bin(*v)] += 1;
    }
    hist
}

/// Between-class score for a split after bin `t`, as `(A, n0 * n1)` where
/// the between-class variance is proportional to `A^2 / (n0 * n1)`.
fn split_score(n0: u64, s0: u64, n1: u64, s1: u64) -> (u128, u128) {
    let a = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
    (a, n0 as u128 * n1 as u128)
}

/// `lhs > rhs` for scores `a^2 / d`, exact when the products fit.
fn score_greater(lhs: (u128, u128), rhs: (u128, u128)) -> bool {
    let exact = lhs
        .0
        .checked_mul(lhs.0)
        .and_then(|x| x.checked_mul(rhs.1))
        .zip(rhs.0.checked_mul(rhs.0).and_then(|x| x.checked_mul(lhs.1)));
    match exact {
        Some((l, r)) => l > r,
        None => {
            let f = |s: (u128, u128)| (s.0 as f64).powi(2) / s.1 as f64;
            f(lhs) > f(rhs)
        }
    }
}

/// Index `t` of the best split (classes are bins `0..=t` and `t+1..`), or
/// `None` when fewer than two bins are occupied.
pub fn otsu_split(hist: &[u64; OTSU_BINS]) -> Option<usize> {
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, c)| b as u64 * c).sum();
    let mut best: Option<(usize, (u128, u128))> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (t, &c) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        n0 += c;
        s0 += t as u64 * c;
        let n1 = total_n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let score = split_score(n0, s0, n1, total_s - s0);
        if best.is_none_or(|(_, b)| score_greater(score, b)) {
            best = Some((t, score));
        }
    }
    best.map(|(t, _)| t)
}

/// Otsu threshold over a 256-bin histogram of `[0, 1]`; the predicted
/// region is every pixel `>= threshold`.
///
/// An all-zero map yields `1/256` (empty region); a map occupying a single
/// bin yields its minimum (every pixel in the region).
pub fn otsu_threshold(map: &ActivationMap) -> f64 {
    if map.max() == 0.0 {
        return 1.0 / OTSU_BINS as f64;
    }
    match otsu_split(&histogram(map)) {
        Some(t) => (t + 1) as f64 / OTSU_BINS as f64,
        None => map.min(),
    }
}

pub fn binarize(map: &ActivationMap, threshold: f64) -> Vec<bool> {
    map.values().iter().map(|v| *v >= threshold).collect()
}

/// Corner-aligned bilinear resize.
pub fn upsample_to_mask(map: &ActivationMap, target: (usize, usize)) -> Result<ActivationMap> {
    let (th, tw) = target;
    if th == 0 || tw == 0 {
        return Err(Error::ShapeMismatch(format!("empty target size {th}x{tw}")));
    }
    if map.shape() == target {
        return Ok(map.clone());
    }
    let (h, w) = map.shape();
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (x.floor() as usize).min(src - 2);
        (lo, lo + 1, x - lo as f64)
    };
    let cols: Vec<_> = (0..tw).map(|j| coord(j, w, tw)).collect();
    let mut values = Vec::with_capacity(th * tw);
    for i in 0..th {
        let (r0, r1, fy) = coord(i, h, th);
        for &(c0, c1, fx) in &cols {
            let top = map.get(r0, c0) * (1.0 - fx) + map.get(r0, c1) * fx;
            let bottom = map.get(r1, c0) * (1.0 - fx) + map.get(r1, c1) * fx;
            values.push((top * (1.0 - fy) + bottom * fy).max(0.0));
        }
    }
    Ok(ActivationMap::from_valid(th, tw, values))
}

/// Intersection over union of two masks; 0 when the union is empty.
pub fn iou(pred: &[bool], gt: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.iter().zip(gt) {
        inter += (*p && *g) as usize;
        union += (*p || *g) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn check_size(map: &ActivationMap, gt: &GroundTruthMaskSet) -> Result<()> {
    if map.shape() != gt.image_size() {
        return Err(Error::ShapeMismatch(format!(
            "map {:?} vs masks {:?}; upsample first",
            map.shape(),
            gt.image_size()
        )));
    }
    if gt.is_empty() {
        return Err(Error::NoMasks);
    }
    Ok(())
}

/// Max-over-classes IoU of the Otsu region, plus the per-class values.
pub fn obj_iou(
    map: &ActivationMap,
    gt: &GroundTruthMaskSet,
) -> Result<(f64, BTreeMap<String, f64>)> {
    check_size(map, gt)?;
    let pred = binarize(map, otsu_threshold(map));
    Ok(obj_iou_of_region(&pred, gt))
}

fn obj_iou_of_region(pred: &[bool], gt: &GroundTruthMaskSet) -> (f64, BTreeMap<String, f64>) {
    let per_class: BTreeMap<String, f64> = gt
        .masks()
        .iter()
        .map(|m| (m.class_name.clone(), iou(pred, &m.mask)))
        .collect();
    let best = per_class.values().copied().fold(0.0, f64::max);
    (best, per_class)
}

fn contrast_with(map: &ActivationMap, fg: &[bool]) -> f64 {
    let (mut sf, mut nf, mut sb, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for (v, f) in map.values().iter().zip(fg) {
        if *f {
            sf += v;
            nf += 1;
        } else {
            sb += v;
            nb += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    mean(sf, nf) / (mean(sb, nb) + EPSILON)
}

fn concentration_with(map: &ActivationMap, fg: &[bool]) -> f64 {
    let inside: f64 = map
        .values()
        .iter()
        .zip(fg)
        .filter(|(_, f)| **f)
        .map(|(v, _)| v)
        .sum();
    inside / (map.sum() + EPSILON)
}

/// Mean foreground activation over mean background activation.
pub fn contrast(map: &ActivationMap, gt: &GroundTruthMaskSet) -> Result<f64> {
    check_size(map, gt)?;
    Ok(contrast_with(map, &gt.union()))
}

/// Fraction of total activation mass inside the ground truth.
pub fn concentration(map: &ActivationMap, gt: &GroundTruthMaskSet) -> Result<f64> {
    check_size(map, gt)?;
    Ok(concentration_with(map, &gt.union()))
}

/// Harmonic mean of IoU, clipped contrast and concentration.
pub fn f3_score(obj_iou: f64, contrast: f64, concentration: f64) -> f64 {
    let clipped = (contrast / CONTRAST_SATURATION).min(1.0);
    if obj_iou <= 0.0 || clipped <= 0.0 || concentration <= 0.0 {
        return 0.0;
    }
    3.0 / (1.0 / obj_iou + 1.0 / clipped + 1.0 / concentration)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample_id: String,
    pub obj_iou: f64,
    pub contrast: f64,
    pub concentration: f64,
    pub f3: f64,
    pub per_class_iou: BTreeMap<String, f64>,
    pub otsu_threshold: f64,
}

impl MetricReport {
    pub fn metric(&self, metric: Metric) -> f64 {
        match metric {
            Metric::ObjIou => self.obj_iou,
            Metric::Contrast => self.contrast,
            Metric::Concentration => self.concentration,
            Metric::F3 => self.f3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ObjIou,
    Contrast,
    Concentration,
    F3,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::ObjIou,
        Metric::Contrast,
        Metric::Concentration,
        Metric::F3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::ObjIou => "obj_iou",
            Metric::Contrast => "contrast",
            Metric::Concentration => "concentration",
            Metric::F3 => "f3",
        }
    }

    /// Whether the metric is reported as a percentage (contrast is a ratio).
    pub fn is_fraction(self) -> bool {
        self != Metric::Contrast
    }
}

/// Upsamples `map` to the mask resolution and computes all four metrics.
pub fn evaluate(
    sample_id: &str,
    map: &ActivationMap,
    gt: &GroundTruthMaskSet,
) -> Result<MetricReport> {
    if gt.is_empty() {
        return Err(Error::NoMasks);
    }
    let up = upsample_to_mask(map, gt.image_size())?;
    let threshold = otsu_threshold(&up);
    let (obj_iou, per_class_iou) = obj_iou_of_region(&binarize(&up, threshold), gt);
    let fg = gt.union();
    let contrast = contrast_with(&up, &fg);
    let concentration = concentration_with(&up, &fg);
    Ok(MetricReport {
        sample_id: sample_id.to_string(),
        obj_iou,
        contrast,
        concentration,
        f3: f3_score(obj_iou, contrast, concentration),
        per_class_iou,
        otsu_threshold: threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population mean and standard deviation; zeros for an empty input.
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: 0.0,
                std: 0.0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Corpus-level summary of a batch of reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub obj_iou: MeanStd,
    pub contrast: MeanStd,
    pub concentration: MeanStd,
    pub f3: MeanStd,
    /// F3 of the averaged IoU, contrast and concentration.
    pub f3_aggregate: f64,
}

impl MetricSummary {
    pub fn of(reports: &[MetricReport]) -> Self {
        let col = |m: Metric| MeanStd::of(reports.iter().map(|r| r.metric(m)));
        let (iou, con, conc) = (
            col(Metric::ObjIou),
            col(Metric::Contrast),
            col(Metric::Concentration),
        );
        Self {
            count: reports.len(),
            obj_iou: iou,
            contrast: con,
            concentration: conc,
            f3: col(Metric::F3),
            f3_aggregate: f3_score(iou.mean, con.mean, conc.mean),
        }
    }

    pub fn get(&self, metric: Metric) -> MeanStd {
        match metric {
            Metric::ObjIou => self.obj_iou,
            Metric::Contrast => self.contrast,
            Metric::Concentration => self.concentration,
            Metric::F3 => self.f3,
        }
    }
}
