//! Distribution-aware confidence gating.
//!
//! A quantile threshold chosen from the map's mean and spread splits pixels
//! into a high-confidence set, kept verbatim, and a low-confidence set that
//! receives a mild spatial Gaussian blur.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{map_stats, ActivationMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    HighVar,
    HighMean,
    LowMean,
    Default,
}

impl Branch {
    pub const ALL: [Branch; 4] = [
        Branch::HighVar,
        Branch::HighMean,
        Branch::LowMean,
        Branch::Default,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Branch::HighVar => "high_var",
            Branch::HighMean => "high_mean",
            Branch::LowMean => "low_mean",
            Branch::Default => "default",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DacgParams {
    /// Spread boundary `delta_sigma`.
    pub delta_sigma: f64,
    /// Upper mean boundary `delta_mu`.
    pub delta_mu: f64,
    /// Lower mean boundary `delta'_mu`.
    pub delta_mu_low: f64,
    /// Percentiles (0..100) per branch.
    pub alpha_high_var: f64,
    pub alpha_high_mean: f64,
    pub alpha_low_mean: f64,
    pub alpha_default: f64,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
}

impl Default for DacgParams {
    fn default() -> Self {
        Self {
            delta_sigma: 0.22,
            delta_mu: 0.35,
            delta_mu_low: 0.25,
            alpha_high_var: 90.0,
            alpha_high_mean: 75.0,
            alpha_low_mean: 80.0,
            alpha_default: 85.0,
            blur_kernel: 3,
            blur_sigma: 0.3,
        }
    }
}

impl DacgParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_sigma", self.delta_sigma),
            ("delta_mu", self.delta_mu),
            ("delta_mu_low", self.delta_mu_low),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "dacg.{name} must lie in (0, 1), got {v}"
                )));
            }
        }
        for (name, v) in [
            ("alpha_high_var", self.alpha_high_var),
            ("alpha_high_mean", self.alpha_high_mean),
            ("alpha_low_mean", self.alpha_low_mean),
            ("alpha_default", self.alpha_default),
        ] {
            if !(v > 0.0 && v < 100.0) {
                return Err(Error::InvalidParameter(format!(
                    "dacg.{name} must lie in (0, 100), got {v}"
                )));
            }
        }
        if self.blur_kernel == 0 || self.blur_kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter(
                "dacg.blur_kernel must be odd".into(),
            ));
        }
        if !(self.blur_sigma > 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::InvalidParameter(
                "dacg.blur_sigma must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn alpha(&self, branch: Branch) -> f64 {
        match branch {
            Branch::HighVar => self.alpha_high_var,
            Branch::HighMean => self.alpha_high_mean,
            Branch::LowMean => self.alpha_low_mean,
            Branch::Default => self.alpha_default,
        }
    }
}

/// Routes a map by its statistics. Precedence: spread, then high mean,
/// then low mean.
pub fn select_branch(mean: f64, std: f64, params: &DacgParams) -> (Branch, f64) {
    let branch = if std > params.delta_sigma {
        Branch::HighVar
    } else if mean > params.delta_mu {
        Branch::HighMean
    } else if mean < params.delta_mu_low {
        Branch::LowMean
    } else {
        Branch::Default
    };
    (branch, params.alpha(branch))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DacgBranchLog {
    pub branch: Branch,
    pub alpha: f64,
    pub tau_conf: f64,
    pub high_confidence: usize,
}

/// Per-branch routing counters for a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingCounts {
    pub high_var: usize,
    pub high_mean: usize,
    pub low_mean: usize,
    pub default: usize,
}

impl RoutingCounts {
    pub fn record(&mut self, branch: Branch) {
        *self.slot(branch) += 1;
    }

    fn slot(&mut self, branch: Branch) -> &mut usize {
        match branch {
            Branch::HighVar => &mut self.high_var,
            Branch::HighMean => &mut self.high_mean,
            Branch::LowMean => &mut self.low_mean,
            Branch::Default => &mut self.default,
        }
    }

    pub fn get(&self, branch: Branch) -> usize {
        match branch {
            Branch::HighVar => self.high_var,
            Branch::HighMean => self.high_mean,
            Branch::LowMean => self.low_mean,
            Branch::Default => self.default,
        }
    }

    pub fn merge(&self, other: &RoutingCounts) -> RoutingCounts {
        RoutingCounts {
            high_var: self.high_var + other.high_var,
            high_mean: self.high_mean + other.high_mean,
            low_mean: self.low_mean + other.low_mean,
            default: self.default + other.default,
        }
    }

    pub fn total(&self) -> usize {
        self.high_var + self.high_mean + self.low_mean + self.default
    }

    /// Share of each branch in percent, in [`Branch::ALL`] order.
    pub fn percentages(&self) -> [f64; 4] {
        let total = self.total();
        Branch::ALL.map(|b| {
            if total == 0 {
                0.0
            } else {
                100.0 * self.get(b) as f64 / total as f64
            }
        })
    }
}

impl FromIterator<Branch> for RoutingCounts {
    fn from_iter<I: IntoIterator<Item = Branch>>(iter: I) -> Self {
        let mut c = RoutingCounts::default();
        for b in iter {
            c.record(b);
        }
        c
    }
}

/// Normalized 2D Gaussian blur with replicate padding.
pub fn gaussian_blur(map: &ActivationMap, kernel: usize, sigma: f64) -> ActivationMap {
    let r = (kernel / 2) as isize;
    let mut weights = Vec::with_capacity(kernel * kernel);
    for di in -r..=r {
        for dj in -r..=r {
            let d2 = (di * di + dj * dj) as f64;
            weights.push((-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let (h, w) = map.shape();
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let centre = map.get(i as usize, j as usize);
            let mut acc = 0.0;
            let mut n = 0;
            for di in -r..=r {
                for dj in -r..=r {
                    acc += weights[n] * (map.get_clamped(i + di, j + dj) - centre);
                    n += 1;
                }
            }
            out.push((centre + acc).max(0.0));
        }
    }
    ActivationMap::from_valid(h, w, out)
}

/// Gated map before renormalization.
pub fn dacg_unnormalized(
    map: &ActivationMap,
    params: &DacgParams,
) -> (ActivationMap, DacgBranchLog) {
    let stats = map_stats(map);
    let (branch, alpha) = select_branch(stats.mean, stats.std, params);
    let tau_conf = stats.quantile(alpha / 100.0);
    let blurred = gaussian_blur(map, params.blur_kernel, params.blur_sigma);
    let mut high_confidence = 0;
    let values = map
        .values()
        .iter()
        .zip(blurred.values())
        .map(|(v, b)| {
            if *v > tau_conf {
                high_confidence += 1;
                *v
            } else {
                *b
            }
        })
        .collect();
    (
        ActivationMap::from_valid(map.height(), map.width(), values),
        DacgBranchLog {
            branch,
            alpha,
            tau_conf,
            high_confidence,
        },
    )
}

pub fn dacg(map: &ActivationMap, params: &DacgParams) -> (ActivationMap, DacgBranchLog) {
    let (out, log) = dacg_unnormalized(map, params);
    (out.normalized(), log)
}
