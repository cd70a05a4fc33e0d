//! The activation map type and the statistics every refinement stage reads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense, row-major 2D grid of finite, non-negative activations.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl ActivationMap {
    /// Builds a map from row-major values, rejecting empty grids and
    /// negative or non-finite entries.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidMap(format!(
                "grid must be at least 1x1, got {height}x{width}"
            )));
        }
        if values.len() != height * width {
            return Err(Error::InvalidMap(format!(
                "{} values do not fill a {height}x{width} grid",
                values.len()
            )));
        }
        if let Some((idx, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidMap(format!(
                "entry {idx} is {v}; entries must be finite and non-negative"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::InvalidMap("ragged rows".into()));
        }
        Self::new(height, width, rows.concat())
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// # Panics
    /// If the grid is empty or `value` is negative or non-finite.
    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width]).expect("valid constant map")
    }

    /// Internal constructor for values that are valid by construction.
    pub(crate) fn from_valid(height: usize, width: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), height * width);
        debug_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
        Self {
            height,
            width,
            values,
            normalized: false,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// True once the map has been min-max normalized.
    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    /// Value at `(row, col)` with out-of-range coordinates clamped to the
    /// nearest edge (replicate padding).
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.values[r * self.width + c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.width)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn same_shape(&self, other: &ActivationMap) -> bool {
        self.shape() == other.shape()
    }

    /// Multiplies every entry by `k >= 0`.
    pub fn scaled(&self, k: f64) -> Result<ActivationMap> {
        ActivationMap::new(
            self.height,
            self.width,
            self.values.iter().map(|v| v * k).collect(),
        )
    }

    /// Min-max normalized copy; see [`normalize_minmax`].
    pub fn normalized(&self) -> ActivationMap {
        normalize_minmax(self)
    }
}

/// Min-max normalization to `[0, 1]`.
///
/// A constant map has no range to stretch: all-zero stays all-zero and any
/// other constant becomes all-ones, so foreground metrics stay meaningful.
pub fn normalize_minmax(map: &ActivationMap) -> ActivationMap {
    let lo = map.min();
    let hi = map.max();
    let values = if hi > lo {
        let range = hi - lo;
        map.values.iter().map(|v| (v - lo) / range).collect()
    } else if hi > 0.0 {
        vec![1.0; map.len()]
    } else {
        vec![0.0; map.len()]
    };
    ActivationMap {
        height: map.height,
        width: map.width,
        values,
        normalized: true,
    }
}

/// Linear-interpolated quantile of ascending `sorted` data, `q` in `[0, 1]`.
///
/// Uses the `(n - 1) * q` rank convention (numpy's default `linear` method).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => 0.0,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        }
    }
}

/// Summary statistics of a map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapStats {
    pub mean: f64,
    /// Population standard deviation (divides by `H * W`).
    pub std: f64,
    /// Fisher-Pearson standardized third moment, 0 for zero-variance maps.
    pub skewness: f64,
    pub min: f64,
    pub max: f64,
    /// Median of the strictly positive entries, 0 if there are none.
    pub median_nonzero: f64,
    /// Mean of the strictly positive entries, 0 if there are none.
    pub mean_nonzero: f64,
    #[serde(skip)]
    sorted: Vec<f64>,
}

impl MapStats {
    pub fn quantile(&self, q: f64) -> f64 {
        quantile_sorted(&self.sorted, q)
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted
    }
}

pub fn map_stats(map: &ActivationMap) -> MapStats {
    let n = map.len() as f64;
    let mut sorted = map.values.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let min = sorted[0];
    let max = sorted[sorted.len() - 1];

    let mean = map.sum() / n;
    let (std, skewness) = if max == min {
        (0.0, 0.0)
    } else {
        let (m2, m3) = map.values.iter().fold((0.0, 0.0), |(m2, m3), v| {
            let d = v - mean;
            (m2 + d * d, m3 + d * d * d)
        });
        let var = m2 / n;
        let std = var.sqrt();
        let skew = if std > 0.0 {
            (m3 / n) / (var * std)
        } else {
            0.0
        };
        (std, skew)
    };

    let first_positive = sorted.partition_point(|v| *v <= 0.0);
    let positive = &sorted[first_positive..];
    let (median_nonzero, mean_nonzero) = if positive.is_empty() {
        (0.0, 0.0)
    } else {
        (
            quantile_sorted(positive, 0.5),
            positive.iter().sum::<f64>() / positive.len() as f64,
        )
    };

    MapStats {
        mean,
        std,
        skewness,
        min,
        max,
        median_nonzero,
        mean_nonzero,
        sorted,
    }
}
