//! Adaptive kernel denoising: a statistics-driven window size feeding a
//! rank-weighted Gaussian (soft median) filter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::map::{map_stats, ActivationMap};

/// Piecewise-constant factor: the first `(upper, factor)` pair with
/// `x <= upper` wins, otherwise `above`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiecewiseFactor {
    pub breaks: Vec<(f64, f64)>,
    pub above: f64,
}

impl PiecewiseFactor {
    pub fn eval(&self, x: f64) -> f64 {
        self.breaks
            .iter()
            .find(|(upper, _)| x <= *upper)
            .map_or(self.above, |(_, f)| *f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AkdParams {
    pub k_base: usize,
    /// Length `S` of the denoising trajectory.
    pub step_count: usize,
    /// `sigma_rank = sigma_rank_scale * k^2`.
    pub sigma_rank_scale: f64,
    pub step_factor: PiecewiseFactor,
    pub std_factor: PiecewiseFactor,
    /// `F_size(H) = clamp(H / size_reference, size_min, size_max)`.
    pub size_reference: f64,
    pub size_min: f64,
    pub size_max: f64,
    /// Caps the kernel at the largest odd integer `<= fraction * min(H, W)`.
    pub k_max_fraction: f64,
}

impl Default for AkdParams {
    fn default() -> Self {
        Self {
            k_base: 3,
            step_count: 16,
            sigma_rank_scale: 1.0 / 6.0,
            step_factor: PiecewiseFactor {
                breaks: vec![(16.0, 1.0), (32.0, 1.25)],
                above: 1.5,
            },
            std_factor: PiecewiseFactor {
                breaks: vec![(0.15, 1.0), (0.30, 1.25)],
                above: 1.5,
            },
            size_reference: 24.0,
            size_min: 0.75,
            size_max: 2.0,
            k_max_fraction: 1.0,
        }
    }
}

impl AkdParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(format!("akd: {m}")));
        if self.k_base < 3 || self.k_base.is_multiple_of(2) {
            return bad("k_base must be an odd integer >= 3");
        }
        if !(self.sigma_rank_scale > 0.0 && self.sigma_rank_scale.is_finite()) {
            return bad("sigma_rank_scale must be positive");
        }
        if !(self.size_reference > 0.0 && self.size_min > 0.0 && self.size_min <= self.size_max) {
            return bad("size factor bounds must satisfy 0 < size_min <= size_max");
        }
        if !(self.k_max_fraction > 0.0 && self.k_max_fraction <= 1.0) {
            return bad("k_max_fraction must lie in (0, 1]");
        }
        for f in [&self.step_factor, &self.std_factor] {
            if f.breaks
                .iter()
                .chain([&(0.0, f.above)])
                .any(|(_, v)| v.is_nan() || *v <= 0.0)
            {
                return bad("factor tables must be positive");
            }
            if f.breaks.windows(2).any(|w| w[1].0 <= w[0].0) {
                return bad("factor breakpoints must be increasing");
            }
        }
        Ok(())
    }
}

/// Nearest odd integer to `x`; exact ties go to the smaller odd.
pub fn round_to_odd(x: f64) -> i64 {
    let half = ((x - 1.0) / 2.0 - 0.5).ceil();
    2 * half as i64 + 1
}

/// Largest admissible kernel for a `height x width` map (never below 3).
pub fn kernel_cap(params: &AkdParams, height: usize, width: usize) -> usize {
    let limit = (params.k_max_fraction * height.min(width) as f64).floor() as usize;
    let odd = if limit % 2 == 1 {
        limit
    } else {
        limit.saturating_sub(1)
    };
    odd.max(3)
}

/// `k = odd(k_base * F_step(S) * F_std(sigma) * F_size(H))`, clamped.
pub fn adaptive_kernel_size(params: &AkdParams, sigma: f64, height: usize, width: usize) -> usize {
    let f_step = params.step_factor.eval(params.step_count as f64);
    let f_std = params.std_factor.eval(sigma);
    let f_size = (height as f64 / params.size_reference).clamp(params.size_min, params.size_max);
    let raw = params.k_base as f64 * f_step * f_std * f_size;
    let cap = kernel_cap(params, height, width) as i64;
    round_to_odd(raw).clamp(3, cap) as usize
}

/// Normalized Gaussian weights over ranks `1..=k^2`, centred on the median rank.
pub fn rank_weights(k: usize, sigma_rank: f64) -> Vec<f64> {
    let n = k * k;
    let mu = (n as f64 + 1.0) / 2.0;
    let raw: Vec<f64> = (1..=n)
        .map(|r| {
            let d = r as f64 - mu;
            (-(d * d) / (2.0 * sigma_rank * sigma_rank)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Each output pixel is the rank-weighted sum of its sorted `k x k`
/// neighbourhood (edges replicated). Not renormalized.
pub fn rank_gaussian_filter(
    map: &ActivationMap,
    k: usize,
    sigma_rank: f64,
) -> Result<ActivationMap> {
    let (h, w) = map.shape();
    if k < 3 || k.is_multiple_of(2) || (k > 3 && k > h.min(w)) {
        return Err(Error::InvalidKernel {
            size: k,
            height: h,
            width: w,
        });
    }
    if !(sigma_rank > 0.0 && sigma_rank.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma_rank must be positive, got {sigma_rank}"
        )));
    }
    let weights = rank_weights(k, sigma_rank);
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h as isize {
        for j in 0..w as isize {
            window.clear();
            for di in -r..=r {
                for dj in -r..=r {
                    window.push(map.get_clamped(i + di, j + dj));
                }
            }
            window.sort_unstable_by(f64::total_cmp);
            out.push(weighted_rank_sum(&window, &weights));
        }
    }
    Ok(ActivationMap::from_valid(h, w, out))
}

/// `sum_n w_n v_n` for ascending `sorted`, written relative to the minimum so
/// equal windows reproduce their value exactly; clamped to the window range.
pub(crate) fn weighted_rank_sum(sorted: &[f64], weights: &[f64]) -> f64 {
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let acc: f64 = sorted.iter().zip(weights).map(|(v, g)| g * (v - lo)).sum();
    (lo + acc).clamp(lo, hi)
}

/// Filtered map before renormalization, plus the kernel size used.
pub fn akd_unnormalized(map: &ActivationMap, params: &AkdParams) -> Result<(ActivationMap, usize)> {
    let sigma = map_stats(map).std;
    let k = adaptive_kernel_size(params, sigma, map.height(), map.width());
    let sigma_rank = params.sigma_rank_scale * (k * k) as f64;
    Ok((rank_gaussian_filter(map, k, sigma_rank)?, k))
}

pub fn akd(map: &ActivationMap, params: &AkdParams) -> Result<ActivationMap> {
    Ok(akd_unnormalized(map, params)?.0.normalized())
}
