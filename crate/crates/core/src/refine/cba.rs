//! Contextual background attenuation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{map_stats, ActivationMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CbaParams {
    /// Weights for (median of positives, 60th percentile, mean of positives, max).
    pub weights: [f64; 4],
    /// Retention floor for background pixels.
    pub gamma: f64,
}

impl Default for CbaParams {
    fn default() -> Self {
        Self {
            weights: [0.35, 0.25, 0.25, 0.15],
            gamma: 0.5,
        }
    }
}

impl CbaParams {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(
                "cba.weights must be non-negative".into(),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "cba.gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// The four background descriptors `[S1, S2, S3, S4]`.
pub fn background_descriptors(map: &ActivationMap) -> [f64; 4] {
    let s = map_stats(map);
    [s.median_nonzero, s.quantile(0.60), s.mean_nonzero, s.max]
}

/// Composite threshold `tau_bg = sum_k w_k S_k`.
pub fn background_threshold(map: &ActivationMap, params: &CbaParams) -> f64 {
    background_descriptors(map)
        .iter()
        .zip(&params.weights)
        .map(|(s, w)| s * w)
        .sum()
}

/// Soft attenuation factor for a background value `v < tau`, never above 1.
pub fn attenuation_factor(v: f64, tau: f64, gamma: f64) -> f64 {
    gamma.max(v / tau).min(1.0)
}

/// Attenuated map before renormalization, plus the threshold used.
pub fn cba_unnormalized(map: &ActivationMap, params: &CbaParams) -> (ActivationMap, f64) {
    let tau = background_threshold(map, params);
    if tau <= 0.0 {
        return (map.clone(), tau);
    }
    let values = map
        .values()
        .iter()
        .map(|v| {
            if *v < tau {
                v * attenuation_factor(*v, tau, params.gamma)
            } else {
                *v
            }
        })
        .collect();
    (
        ActivationMap::from_valid(map.height(), map.width(), values),
        tau,
    )
}

pub fn cba(map: &ActivationMap, params: &CbaParams) -> ActivationMap {
    cba_unnormalized(map, params).0.normalized()
}
